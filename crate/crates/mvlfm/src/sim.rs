//! Simulation engine: the generative model, scenario configuration, the four
//! competing model variants, ISE/ISPE metrics, singular-fit accounting, and
//! the eigenfunction-recovery study.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{
    bspline_basis, constant_basis, natural_cubic_basis, ortho_poly_basis, BasisError,
    UnivariateBasis,
};
use crate::data::{CovariateTable, DataError, MvCurve, MvLongDataset, ObservationKey, Side};
use crate::fpca::{block_diag, fit_mvfpca, FpcaError, Truncation};
use crate::lmm::{CovSpec, CovStructure, FitOpts, LevelSpec};
use crate::model::{
    fit_score_models, fixed_effect_curve, intercept_surface, predict_curve, LongitudinalBasis,
    ModelError, RandomBasisSource,
};
use crate::rng::{derive_seed, seeded_rng};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("noise kernel matrix is not positive definite after the 1e-10 ridge")]
    KernelNotPd,
    #[error("grid mismatch between estimate and truth")]
    GridMismatch,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lmm(#[from] crate::lmm::LmmError),
}

// ---------------------------------------------------------------------------
// Generator parameters
// ---------------------------------------------------------------------------

pub const N_SCORES: usize = 10;
pub const N_DIMS: usize = 3;
pub const N_XI: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    Binomial { p: f64 },
    Gaussian { mean: f64, sd: f64 },
}

impl CovariateLaw {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            CovariateLaw::Binomial { p } => {
                if rng.gen::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            CovariateLaw::Gaussian { mean, sd } => {
                mean + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub l: f64,
    pub sigma: f64,
}

/// All parameters of the generative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub mean: MvCurve,
    pub dim_names: Vec<String>,
    /// Functional basis over evaluation time t interpreting `basis10`.
    pub func_basis: UnivariateBasis,
    /// 10 x (P * B): spline coefficients of the generating multivariate basis
    /// functions, orthonormal under the block Gram.
    pub basis10: DMatrix<f64>,
    /// 10 x 3 intercept coefficients over the longitudinal polynomial basis.
    pub beta0: DMatrix<f64>,
    /// 10 x 2 covariate coefficients.
    pub beta_a: DMatrix<f64>,
    /// 10 x 3 subject-level variances (diagonal of each Q*_k).
    pub q_diag: DMatrix<f64>,
    /// 10 x 3 subject-and-side-level variances (diagonal of each R*_k).
    pub r_diag: DMatrix<f64>,
    /// 10 residual variances.
    pub s: Vec<f64>,
    pub covariate_laws: Vec<CovariateLaw>,
    pub noise: NoiseParams,
}

/// The longitudinal polynomial basis the generator uses (degree 2, grid
/// orthonormalised, so the first column is the constant 1).
pub fn generator_xi_basis() -> UnivariateBasis {
    ortho_poly_basis(2, 101, (0.0, 1.0))
}

impl GeneratorParams {
    pub fn n_basis_per_dim(&self) -> usize {
        self.func_basis.n_basis()
    }

    /// Block-diagonal Gram weight for the stacked coefficient space.
    pub fn block_gram(&self) -> DMatrix<f64> {
        block_diag(&self.func_basis.gram().entries, N_DIMS)
    }

    /// Generating basis function `k` evaluated on a t-grid (P x G).
    pub fn psi(&self, k: usize, grid: &[f64]) -> DMatrix<f64> {
        let design = self.func_basis.eval(grid).expect("grid within domain");
        let b = self.n_basis_per_dim();
        let mut out = DMatrix::zeros(N_DIMS, grid.len());
        for p in 0..N_DIMS {
            for g in 0..grid.len() {
                let mut v = 0.0;
                for j in 0..b {
                    v += self.basis10[(k, p * b + j)] * design[(g, j)];
                }
                out[(p, g)] = v;
            }
        }
        out
    }
}

/// Deterministic default parameters: a smooth mean, ten smooth basis
/// functions orthonormalised under the block Gram, a geometric score-variance
/// spectrum, and longitudinal variation concentrated at the subject level.
pub fn default_params() -> GeneratorParams {
    let grid: Vec<f64> = (0..101).map(|i| i as f64).collect();
    let func_basis = bspline_basis(4, 15, (0.0, 100.0));
    let b = func_basis.n_basis();
    let pb = N_DIMS * b;

    let mut mean = DMatrix::zeros(N_DIMS, grid.len());
    let offsets = [30.0, 10.0, -15.0];
    let amps = [25.0, 18.0, 12.0];
    for p in 0..N_DIMS {
        for (g, &t) in grid.iter().enumerate() {
            mean[(p, g)] = offsets[p]
                + amps[p] * (2.0 * std::f64::consts::PI * t / 100.0 + 0.8 * p as f64).sin();
        }
    }

    // Smooth deterministic seed directions, Gram-Schmidt orthonormalised
    // under the block Gram.
    let w = block_diag(&func_basis.gram().entries, N_DIMS);
    let mut basis10 = DMatrix::zeros(N_SCORES, pb);
    for m in 0..N_SCORES {
        let mut v = DVector::from_fn(pb, |j, _| {
            let x = (j as f64 + 0.5) / pb as f64;
            (std::f64::consts::PI * (m + 1) as f64 * x).cos()
                + 0.25 * (2.0 * std::f64::consts::PI * (m + 1) as f64 * x).sin()
        });
        for prev in 0..m {
            let u = basis10.row(prev).transpose();
            let proj = (u.transpose() * &w * &v)[(0, 0)];
            v -= u * proj;
        }
        let norm = (v.transpose() * &w * &v)[(0, 0)].sqrt();
        basis10.row_mut(m).copy_from(&(v / norm).transpose());
    }

    let mvar: Vec<f64> = (0..N_SCORES).map(|k| 3000.0 * 0.65f64.powi(k as i32)).collect();
    let sd: Vec<f64> = mvar.iter().map(|v| v.sqrt()).collect();
    let mut beta0 = DMatrix::zeros(N_SCORES, N_XI);
    let mut beta_a = DMatrix::zeros(N_SCORES, 2);
    let mut q_diag = DMatrix::zeros(N_SCORES, N_XI);
    let mut r_diag = DMatrix::zeros(N_SCORES, N_XI);
    let mut s = Vec::with_capacity(N_SCORES);
    for k in 0..N_SCORES {
        let kf = k as f64;
        beta0[(k, 0)] = 0.3 * sd[k] * (kf + 1.0).cos();
        beta0[(k, 1)] = 2.0 * sd[k] * (2.0 * kf + 1.0).sin();
        beta0[(k, 2)] = 1.5 * sd[k] * (3.0 * kf + 2.0).cos();
        beta_a[(k, 0)] = 0.4 * sd[k] * (kf + 2.0).sin();
        beta_a[(k, 1)] = 0.25 * sd[k] * (2.0 * kf + 3.0).cos();
        q_diag[(k, 0)] = 0.45 * mvar[k];
        q_diag[(k, 1)] = 4.0 * mvar[k];
        q_diag[(k, 2)] = 4.0 * mvar[k];
        r_diag[(k, 0)] = 0.3 * mvar[k];
        r_diag[(k, 1)] = 0.2 * mvar[k];
        r_diag[(k, 2)] = 0.2 * mvar[k];
        s.push(0.1 * mvar[k]);
    }

    GeneratorParams {
        mean: MvCurve {
            values: mean,
            grid,
        },
        dim_names: vec!["hip".into(), "knee".into(), "ankle".into()],
        func_basis,
        basis10,
        beta0,
        beta_a,
        q_diag,
        r_diag,
        s,
        covariate_laws: vec![
            CovariateLaw::Binomial { p: 0.5 },
            CovariateLaw::Gaussian { mean: 0.0, sd: 1.0 },
        ],
        noise: NoiseParams { l: 0.25, sigma: 0.9 },
    }
}

/// Multiply the standard deviations of the longitudinally varying (d = 2, 3)
/// random-effect entries by `factor` (variances by `factor^2`); the constant
/// entries and the residual variances are untouched.
pub fn scale_strength(params: &GeneratorParams, factor: f64) -> GeneratorParams {
    let mut out = params.clone();
    for k in 0..N_SCORES {
        for d in 1..N_XI {
            out.q_diag[(k, d)] *= factor * factor;
            out.r_diag[(k, d)] *= factor * factor;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scenario configuration and generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Polynomial,
    Naive,
    Spline,
    Mlfpca,
}

impl ModelVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Polynomial => "polynomial",
            ModelVariant::Naive => "naive",
            ModelVariant::Spline => "spline",
            ModelVariant::Mlfpca => "mlfpca",
        }
    }

    /// The fixed longitudinal basis: the generator's orthogonal polynomials
    /// for the polynomial variant, a four-function natural cubic spline
    /// basis (which spans constants) for the others.
    pub fn long_basis(&self) -> LongitudinalBasis {
        let cubic = || natural_cubic_basis(4, (0.0, 1.0));
        match self {
            ModelVariant::Polynomial => LongitudinalBasis::shared(generator_xi_basis()),
            ModelVariant::Naive => LongitudinalBasis {
                fixed: cubic(),
                subject: constant_basis((0.0, 1.0)),
                side: constant_basis((0.0, 1.0)),
                random_source: RandomBasisSource::Shared,
            },
            ModelVariant::Spline => LongitudinalBasis {
                fixed: cubic(),
                subject: cubic(),
                side: constant_basis((0.0, 1.0)),
                random_source: RandomBasisSource::Shared,
            },
            ModelVariant::Mlfpca => LongitudinalBasis {
                fixed: cubic(),
                subject: cubic(),
                side: cubic(),
                random_source: RandomBasisSource::EstimatedMlFpca {
                    pve: 0.95,
                    t_grid_size: 41,
                },
            },
        }
    }

    pub fn covspec(&self) -> CovSpec {
        let level = |structure, columns| LevelSpec { structure, columns };
        match self {
            ModelVariant::Polynomial => CovSpec {
                subject: level(CovStructure::Unstructured, vec![0, 1, 2]),
                side: level(CovStructure::Unstructured, vec![0, 1, 2]),
            },
            ModelVariant::Naive => CovSpec {
                subject: level(CovStructure::Unstructured, vec![0]),
                side: level(CovStructure::Unstructured, vec![0]),
            },
            ModelVariant::Spline => CovSpec {
                subject: level(CovStructure::Unstructured, vec![0, 1, 2, 3]),
                side: level(CovStructure::Unstructured, vec![0]),
            },
            // Per-score diagonal specifications are resolved during fitting.
            ModelVariant::Mlfpca => CovSpec {
                subject: level(CovStructure::Diagonal, vec![0]),
                side: level(CovStructure::Diagonal, vec![0]),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_subjects: usize,
    pub n_per_side: usize,
    pub missing_prop: f64,
    pub strength: f64,
    pub models: Vec<ModelVariant>,
    pub pve: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Held-out strides per subject-side, drawn from the removed pool.
    #[serde(default = "default_test_per_side")]
    pub test_per_side: usize,
    /// Optimiser settings for the per-score REML fits.
    #[serde(default)]
    pub fit_opts: FitOpts,
}

fn default_test_per_side() -> usize {
    10
}

/// True fixed-effect functions on dense grids, for ISE computation. The
/// intercept surfaces include the mean function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedTruth {
    pub t_grid: Vec<f64>,
    pub big_t_grid: Vec<f64>,
    /// Per dimension: |t| x |T|.
    pub intercept: Vec<DMatrix<f64>>,
    /// Per covariate: P x |t|.
    pub covariate_curves: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub train: MvLongDataset,
    pub test: MvLongDataset,
    pub truth: FixedTruth,
}

/// Evaluate the true fixed-effect functions of the generator.
pub fn fixed_truth(params: &GeneratorParams) -> FixedTruth {
    let t_grid = params.mean.grid.clone();
    let big_t_grid: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
    let xi = generator_xi_basis()
        .eval(&big_t_grid)
        .expect("T grid within domain");
    let psis: Vec<DMatrix<f64>> = (0..N_SCORES).map(|k| params.psi(k, &t_grid)).collect();
    let mut intercept =
        vec![DMatrix::zeros(t_grid.len(), big_t_grid.len()); N_DIMS];
    for k in 0..N_SCORES {
        for (j, _) in big_t_grid.iter().enumerate() {
            let wkj: f64 = (0..N_XI).map(|d| params.beta0[(k, d)] * xi[(j, d)]).sum();
            for p in 0..N_DIMS {
                for (g, _) in t_grid.iter().enumerate() {
                    intercept[p][(g, j)] += wkj * psis[k][(p, g)];
                }
            }
        }
    }
    for p in 0..N_DIMS {
        for (g, _) in t_grid.iter().enumerate() {
            for j in 0..big_t_grid.len() {
                intercept[p][(g, j)] += params.mean.values[(p, g)];
            }
        }
    }
    let covariate_curves = (0..params.covariate_laws.len())
        .map(|a| {
            let mut curve = DMatrix::zeros(N_DIMS, t_grid.len());
            for k in 0..N_SCORES {
                for p in 0..N_DIMS {
                    for g in 0..t_grid.len() {
                        curve[(p, g)] += params.beta_a[(k, a)] * psis[k][(p, g)];
                    }
                }
            }
            curve
        })
        .collect();
    FixedTruth {
        t_grid,
        big_t_grid,
        intercept,
        covariate_curves,
    }
}

/// Cholesky factor of the smooth-noise kernel `C(t,t') = sigma^2
/// phi(l |t - t'|)` on the evaluation grid, with a 1e-10 ridge.
fn noise_cholesky(params: &GeneratorParams) -> Result<DMatrix<f64>, SimError> {
    let grid = &params.mean.grid;
    let g = grid.len();
    if params.noise.sigma == 0.0 {
        return Ok(DMatrix::zeros(g, g));
    }
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut kernel = DMatrix::zeros(g, g);
    for i in 0..g {
        for j in 0..g {
            kernel[(i, j)] =
                params.noise.sigma * params.noise.sigma * phi(params.noise.l * (grid[i] - grid[j]).abs());
        }
        kernel[(i, i)] += 1e-10;
    }
    nalgebra::linalg::Cholesky::new(kernel)
        .map(|c| c.l())
        .ok_or(SimError::KernelNotPd)
}

/// Generate one replicate dataset: covariates per subject, random effects
/// per subject and side, scores per stride, curves from the generating basis
/// plus smooth noise, then per-subject-side missingness with the held-out
/// test strides drawn from the removed pool.
pub fn generate_dataset(
    params: &GeneratorParams,
    scenario: &ScenarioConfig,
    replicate_seed: u64,
) -> Result<GeneratedData, SimError> {
    let mut rng = seeded_rng(replicate_seed, &[b"generate"]);
    let grid = params.mean.grid.clone();
    let g = grid.len();
    let chol = noise_cholesky(params)?;
    let psis: Vec<DMatrix<f64>> = (0..N_SCORES).map(|k| params.psi(k, &grid)).collect();
    let n = scenario.n_per_side;
    let big_t: Vec<f64> = (0..n)
        .map(|l| if n == 1 { 0.0 } else { l as f64 / (n - 1) as f64 })
        .collect();
    let xi = generator_xi_basis().eval(&big_t)?;

    let norm = |rng: &mut rand_chacha::ChaCha8Rng| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    };

    let mut train_curves = Vec::new();
    let mut train_keys = Vec::new();
    let mut test_curves = Vec::new();
    let mut test_keys = Vec::new();
    let mut cov_rows = std::collections::BTreeMap::new();
    let n_missing = (scenario.missing_prop * n as f64).round() as usize;

    for i in 0..scenario.n_subjects {
        let sid = format!("s{i:04}");
        let x: Vec<f64> = params.covariate_laws.iter().map(|law| law.draw(&mut rng)).collect();
        // Subject-level random effects, per score.
        let mut u = DMatrix::zeros(N_SCORES, N_XI);
        for k in 0..N_SCORES {
            for d in 0..N_XI {
                u[(k, d)] = params.q_diag[(k, d)].sqrt() * norm(&mut rng);
            }
        }
        for side in [Side::Left, Side::Right] {
            cov_rows.insert((sid.clone(), side), x.clone());
            let mut v = DMatrix::zeros(N_SCORES, N_XI);
            for k in 0..N_SCORES {
                for d in 0..N_XI {
                    v[(k, d)] = params.r_diag[(k, d)].sqrt() * norm(&mut rng);
                }
            }
            let mut curves_side = Vec::with_capacity(n);
            for l in 0..n {
                let mut values = params.mean.values.clone();
                for k in 0..N_SCORES {
                    let mut score = params.s[k].sqrt() * norm(&mut rng);
                    for d in 0..N_XI {
                        score += (params.beta0[(k, d)] + u[(k, d)] + v[(k, d)]) * xi[(l, d)];
                    }
                    for (a, &xa) in x.iter().enumerate() {
                        score += xa * params.beta_a[(k, a)];
                    }
                    values += &psis[k] * score;
                }
                for p in 0..N_DIMS {
                    let z = DVector::from_fn(g, |_, _| norm(&mut rng));
                    let noise = &chol * z;
                    for gg in 0..g {
                        values[(p, gg)] += noise[gg];
                    }
                }
                curves_side.push(values);
            }
            // Remove strides at random; the test set comes from the removed pool.
            let mut order: Vec<usize> = (0..n).collect();
            for j in (1..n).rev() {
                let pick = rng.gen_range(0..=j);
                order.swap(j, pick);
            }
            let removed = &order[..n_missing.min(n)];
            let mut test_set: Vec<usize> = removed
                .iter()
                .copied()
                .take(scenario.test_per_side)
                .collect();
            test_set.sort_unstable();
            let mut removed_sorted = removed.to_vec();
            removed_sorted.sort_unstable();
            for (l, curve) in curves_side.into_iter().enumerate() {
                let key = ObservationKey {
                    subject_id: sid.clone(),
                    side,
                    stride_index: l as u32 + 1,
                    long_time: big_t[l],
                };
                if removed_sorted.binary_search(&l).is_ok() {
                    if test_set.binary_search(&l).is_ok() {
                        test_curves.push(curve);
                        test_keys.push(key);
                    }
                } else {
                    train_curves.push(curve);
                    train_keys.push(key);
                }
            }
        }
    }
    let covariates = CovariateTable {
        names: vec!["speed".into(), "score_z".into()],
        rows: cov_rows,
    };
    let train = MvLongDataset {
        grid: grid.clone(),
        dim_names: params.dim_names.clone(),
        curves: train_curves,
        keys: train_keys,
        covariates: covariates.clone(),
    };
    let test = MvLongDataset {
        grid,
        dim_names: params.dim_names.clone(),
        curves: test_curves,
        keys: test_keys,
        covariates,
    };
    Ok(GeneratedData {
        train,
        test,
        truth: fixed_truth(params),
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn trapezoid(grid: &[f64], values: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (grid[i] - grid[i - 1]) * (values(i) + values(i - 1));
    }
    acc
}

/// Integrated squared error of an intercept-surface estimate:
/// `(1/|t|) sum_p Int_t Int_T (est - truth)^2 dT dt` by trapezoid rule.
pub fn ise_surface(
    estimate: &[DMatrix<f64>],
    truth: &[DMatrix<f64>],
    t_grid: &[f64],
    big_t_grid: &[f64],
) -> Result<f64, SimError> {
    if estimate.len() != truth.len() {
        return Err(SimError::GridMismatch);
    }
    let t_span = t_grid[t_grid.len() - 1] - t_grid[0];
    let mut total = 0.0;
    for (est, tru) in estimate.iter().zip(truth) {
        if est.shape() != (t_grid.len(), big_t_grid.len()) || est.shape() != tru.shape() {
            return Err(SimError::GridMismatch);
        }
        total += trapezoid(t_grid, |r| {
            trapezoid(big_t_grid, |c| {
                let d = est[(r, c)] - tru[(r, c)];
                d * d
            })
        });
    }
    Ok(total / t_span)
}

/// Integrated squared error of a covariate-effect curve estimate:
/// `(1/|t|) sum_p Int_t (est - truth)^2 dt`.
pub fn ise_curve(
    estimate: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    t_grid: &[f64],
) -> Result<f64, SimError> {
    if estimate.shape() != truth.shape() || estimate.ncols() != t_grid.len() {
        return Err(SimError::GridMismatch);
    }
    let t_span = t_grid[t_grid.len() - 1] - t_grid[0];
    let mut total = 0.0;
    for p in 0..estimate.nrows() {
        total += trapezoid(t_grid, |c| {
            let d = estimate[(p, c)] - truth[(p, c)];
            d * d
        });
    }
    Ok(total / t_span)
}

/// Integrated squared prediction error between two multivariate curves on
/// the same grid: `(1/|t|) sum_p Int_t (pred - obs)^2 dt`.
pub fn ispe(predicted: &MvCurve, observed: &MvCurve) -> Result<f64, SimError> {
    if predicted.grid != observed.grid || predicted.values.shape() != observed.values.shape() {
        return Err(SimError::GridMismatch);
    }
    let grid = &predicted.grid;
    let t_span = grid[grid.len() - 1] - grid[0];
    let mut total = 0.0;
    for p in 0..predicted.values.nrows() {
        total += trapezoid(grid, |c| {
            let d = predicted.values[(p, c)] - observed.values[(p, c)];
            d * d
        });
    }
    Ok(total / t_span)
}

// ---------------------------------------------------------------------------
// Replicates
// ---------------------------------------------------------------------------

/// Metrics for one model variant within one replicate. On a fit failure the
/// numeric fields are NaN and `error` carries the message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub model: ModelVariant,
    pub ise_beta0: f64,
    pub ise_beta1: f64,
    pub ise_beta2: f64,
    pub mean_ispe: f64,
    pub fpca_seconds: f64,
    pub fit_seconds: f64,
    pub singular_count: usize,
    pub k_used: usize,
    /// Pooled lag-1 conditional-residual autocorrelation, averaged over the
    /// first `min(10, K)` score models.
    pub acf1: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub variants: Vec<VariantMetrics>,
}

/// Run one replicate: generate a dataset, expand it once with the pooled
/// FPCA, then fit and evaluate every selected model variant. Fit failures
/// are recorded per variant; the replicate always completes.
pub fn run_replicate(
    params: &GeneratorParams,
    scenario: &ScenarioConfig,
    replicate: usize,
) -> Result<ReplicateMetrics, SimError> {
    let scaled = scale_strength(params, scenario.strength);
    let seed = derive_seed(scenario.seed, &[b"replicate", &(replicate as u64).to_le_bytes()]);
    let gen = generate_dataset(&scaled, scenario, seed)?;
    let t0 = Instant::now();
    let (fpca, scores) = fit_mvfpca(&gen.train, &params.func_basis, Truncation::Pve(scenario.pve))?;
    let fpca_seconds = t0.elapsed().as_secs_f64();
    let opts = scenario.fit_opts.clone();

    let variants = scenario
        .models
        .iter()
        .map(|&variant| {
            let t1 = Instant::now();
            match evaluate_variant(&gen, fpca.clone(), &scores, variant, &opts) {
                Ok(m) => VariantMetrics {
                    model: variant,
                    ise_beta0: m.ise0,
                    ise_beta1: m.ise1,
                    ise_beta2: m.ise2,
                    mean_ispe: m.mean_ispe,
                    fpca_seconds,
                    fit_seconds: t1.elapsed().as_secs_f64(),
                    singular_count: m.singular,
                    k_used: m.k_used,
                    acf1: m.acf1,
                    error: None,
                },
                Err(err) => VariantMetrics {
                    model: variant,
                    ise_beta0: f64::NAN,
                    ise_beta1: f64::NAN,
                    ise_beta2: f64::NAN,
                    mean_ispe: f64::NAN,
                    fpca_seconds,
                    fit_seconds: t1.elapsed().as_secs_f64(),
                    singular_count: 0,
                    k_used: fpca.k(),
                    acf1: f64::NAN,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();
    Ok(ReplicateMetrics {
        replicate,
        variants,
    })
}

struct VariantEval {
    ise0: f64,
    ise1: f64,
    ise2: f64,
    mean_ispe: f64,
    singular: usize,
    k_used: usize,
    acf1: f64,
}

fn evaluate_variant(
    gen: &GeneratedData,
    fpca: crate::fpca::MvFpcaModel,
    scores: &crate::fpca::ScoreTable,
    variant: ModelVariant,
    opts: &FitOpts,
) -> Result<VariantEval, SimError> {
    let long_basis = variant.long_basis();
    let covspec = variant.covspec();
    let fit = fit_score_models(&gen.train, fpca, scores, &long_basis, &covspec, opts)?;
    let k_used = fit.k();
    let singular = fit
        .fits
        .iter()
        .take(10)
        .filter(|f| f.singular)
        .count();
    let acf1 = pooled_acf1(&fit, scores, &gen.train)?;

    // Intercept ISE on the truth grids, adding back the estimated mean.
    let mut est_surfaces = intercept_surface(&fit, &gen.truth.t_grid, &gen.truth.big_t_grid)?;
    for (p, surface) in est_surfaces.iter_mut().enumerate() {
        for r in 0..gen.truth.t_grid.len() {
            for c in 0..gen.truth.big_t_grid.len() {
                surface[(r, c)] += fit.fpca.mean.values[(p, r)];
            }
        }
    }
    let ise0 = ise_surface(
        &est_surfaces,
        &gen.truth.intercept,
        &gen.truth.t_grid,
        &gen.truth.big_t_grid,
    )?;
    let ise_a: Vec<f64> = (0..fit.covariate_names.len())
        .map(|a| {
            ise_curve(
                &fixed_effect_curve(&fit, a).estimate,
                &gen.truth.covariate_curves[a],
                &gen.truth.t_grid,
            )
        })
        .collect::<Result<_, _>>()?;

    let mut total_ispe = 0.0;
    for (i, key) in gen.test.keys.iter().enumerate() {
        let cov = gen.test.covariates.rows[&(key.subject_id.clone(), key.side)].clone();
        let pred = predict_curve(&fit, key, &cov)?;
        let observed = MvCurve {
            values: gen.test.curves[i].clone(),
            grid: gen.test.grid.clone(),
        };
        total_ispe += ispe(&pred, &observed)?;
    }
    let mean_ispe = total_ispe / gen.test.keys.len().max(1) as f64;
    Ok(VariantEval {
        ise0,
        ise1: ise_a[0],
        ise2: ise_a[1],
        mean_ispe,
        singular,
        k_used,
        acf1,
    })
}

/// Pooled lag-1 conditional-residual autocorrelation averaged over the
/// score models of the first `min(10, K)` components.
fn pooled_acf1(
    fit: &crate::model::MvLfmmFit,
    scores: &crate::fpca::ScoreTable,
    train: &MvLongDataset,
) -> Result<f64, SimError> {
    let mut total = 0.0;
    let take = fit.k().min(10);
    for k in 0..take {
        let lb = LongitudinalBasis {
            fixed: fit.long_basis.fixed.clone(),
            subject: fit.levels[k].subject_basis.clone(),
            side: fit.levels[k].side_basis.clone(),
            random_source: RandomBasisSource::Shared,
        };
        let design = crate::lmm::build_design(
            scores,
            k,
            &train.covariates,
            &lb,
            &fit.levels[k].covspec,
        )?;
        let diag = crate::lmm::residual_diagnostics(&fit.fits[k], &design, 1);
        total += diag.acf.get(1).copied().unwrap_or(0.0);
    }
    Ok(total / take.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Marginal score covariance and the recovery study
// ---------------------------------------------------------------------------

/// Monte-Carlo covariance of the 10-score vector marginalised over subjects,
/// sides, strides, longitudinal time and covariates.
pub fn marginal_score_covariance(
    params: &GeneratorParams,
    n_mc: usize,
    seed: u64,
) -> DMatrix<f64> {
    let mut rng = seeded_rng(seed, &[b"marginal"]);
    let xi_basis = generator_xi_basis();
    let mut sum = DVector::zeros(N_SCORES);
    let mut cross = DMatrix::zeros(N_SCORES, N_SCORES);
    for _ in 0..n_mc {
        let x: Vec<f64> = params.covariate_laws.iter().map(|law| law.draw(&mut rng)).collect();
        let big_t: f64 = rng.gen();
        let xi = xi_basis.eval(&[big_t]).expect("T in [0,1]");
        let mut score = DVector::zeros(N_SCORES);
        for k in 0..N_SCORES {
            let mut v = params.s[k].sqrt()
                * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            for d in 0..N_XI {
                let u_kd = params.q_diag[(k, d)].sqrt()
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let v_kd = params.r_diag[(k, d)].sqrt()
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                v += (params.beta0[(k, d)] + u_kd + v_kd) * xi[(0, d)];
            }
            for (a, &xa) in x.iter().enumerate() {
                v += xa * params.beta_a[(k, a)];
            }
            score[k] = v;
        }
        sum += &score;
        cross += &score * score.transpose();
    }
    let nf = n_mc as f64;
    let mean = sum / nf;
    (cross - &mean * mean.transpose() * nf) / (nf - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    ZeroFixed,
    WithFixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    /// Mean estimated eigenfunction coefficients (10 x P*B), sign-aligned.
    pub mean_coefs: DMatrix<f64>,
    pub generating_basis: DMatrix<f64>,
    /// The generating basis rotated by the eigenvectors of the marginal
    /// score covariance.
    pub rotated_basis: DMatrix<f64>,
    pub l2_raw: Vec<f64>,
    pub l2_rotated: Vec<f64>,
}

/// Average the first 10 estimated mv-FPCs over replicated datasets and
/// compare them to the generating basis and its marginal-covariance
/// rotation.
pub fn recovery_study(
    params: &GeneratorParams,
    mode: RecoveryMode,
    n_replicates: usize,
    n_subjects: usize,
    seed: u64,
) -> Result<RecoveryResult, SimError> {
    let mut params_r = params.clone();
    if mode == RecoveryMode::ZeroFixed {
        params_r.beta0.fill(0.0);
        params_r.beta_a.fill(0.0);
    }
    let scenario = ScenarioConfig {
        n_subjects,
        n_per_side: 10,
        missing_prop: 0.0,
        strength: 1.0,
        models: vec![],
        pve: 1.0,
        replicates: n_replicates,
        seed,
        test_per_side: 0,
        fit_opts: Default::default(),
    };
    let w = params.block_gram();
    let pb = params_r.basis10.ncols();
    let mut mean_coefs: DMatrix<f64> = DMatrix::zeros(N_SCORES, pb);
    for rep in 0..n_replicates {
        let rep_seed = derive_seed(seed, &[b"recovery", &(rep as u64).to_le_bytes()]);
        let gen = generate_dataset(&params_r, &scenario, rep_seed)?;
        let (fpca, _) = fit_mvfpca(&gen.train, &params.func_basis, Truncation::K(N_SCORES))?;
        for k in 0..N_SCORES {
            let est = fpca.eig_coefs.row(k).transpose();
            let target = params_r.basis10.row(k).transpose();
            let overlap = (target.transpose() * &w * &est)[(0, 0)];
            let sign = if overlap < 0.0 { -1.0 } else { 1.0 };
            for j in 0..pb {
                mean_coefs[(k, j)] += sign * est[j] / n_replicates as f64;
            }
        }
    }

    let marg = marginal_score_covariance(&params_r, 100_000, derive_seed(seed, &[b"marg"]));
    let eig = marg.symmetric_eigen();
    let mut order: Vec<usize> = (0..N_SCORES).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut rotated = DMatrix::zeros(N_SCORES, pb);
    for (k, &src) in order.iter().enumerate() {
        for m in 0..N_SCORES {
            for j in 0..pb {
                rotated[(k, j)] += eig.eigenvectors[(m, src)] * params_r.basis10[(m, j)];
            }
        }
    }

    let l2 = |target: &DMatrix<f64>| -> Vec<f64> {
        (0..N_SCORES)
            .map(|k| {
                let est = mean_coefs.row(k).transpose();
                let mut tgt = target.row(k).transpose();
                if (tgt.transpose() * &w * &est)[(0, 0)] < 0.0 {
                    tgt = -tgt;
                }
                let diff = est - tgt;
                (diff.transpose() * &w * &diff)[(0, 0)].sqrt()
            })
            .collect()
    };
    let l2_raw = l2(&params_r.basis10);
    let l2_rotated = l2(&rotated);
    Ok(RecoveryResult {
        mean_coefs,
        generating_basis: params_r.basis10.clone(),
        rotated_basis: rotated,
        l2_raw,
        l2_rotated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_scenario() -> ScenarioConfig {
        ScenarioConfig {
            n_subjects: 2,
            n_per_side: 4,
            missing_prop: 0.0,
            strength: 1.0,
            models: vec![],
            pve: 0.995,
            replicates: 1,
            seed: 1,
            test_per_side: 10,
        fit_opts: Default::default(),
    }
    }

    #[test]
    fn default_params_orthonormal_and_valid() {
        let params = default_params();
        let w = params.block_gram();
        let prod = &params.basis10 * &w * params.basis10.transpose();
        for i in 0..N_SCORES {
            for j in 0..N_SCORES {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (prod[(i, j)] - expect).abs() < 1e-6,
                    "gram[{i},{j}] = {}",
                    prod[(i, j)]
                );
            }
        }
        assert!(params.q_diag.iter().all(|&v| v >= 0.0));
        assert!(params.r_diag.iter().all(|&v| v >= 0.0));
        assert!(params.s.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn generation_bookkeeping() {
        let params = default_params();
        let gen = generate_dataset(&params, &tiny_scenario(), 7).unwrap();
        assert_eq!(gen.train.keys.len(), 2 * 2 * 4);
        assert_eq!(gen.test.keys.len(), 0);
        // Half missing: per side 2 removed, both in the test set.
        let mut half = tiny_scenario();
        half.missing_prop = 0.5;
        let gen2 = generate_dataset(&params, &half, 7).unwrap();
        assert_eq!(gen2.train.keys.len(), 2 * 2 * 2);
        assert_eq!(gen2.test.keys.len(), 2 * 2 * 2);
    }

    #[test]
    fn generation_deterministic() {
        let params = default_params();
        let a = generate_dataset(&params, &tiny_scenario(), 11).unwrap();
        let b = generate_dataset(&params, &tiny_scenario(), 11).unwrap();
        for (ca, cb) in a.train.curves.iter().zip(&b.train.curves) {
            assert_eq!(ca, cb);
        }
        let c = generate_dataset(&params, &tiny_scenario(), 12).unwrap();
        assert!((&a.train.curves[0] - &c.train.curves[0]).amax() > 1e-8);
    }

    #[test]
    fn noise_variance_matches_kernel() {
        // Pointwise variance sigma^2 phi(0) = 0.81 * 0.3989423 ~= 0.323143,
        // empirically within 5% over 10^4 draws.
        let params = default_params();
        let chol = noise_cholesky(&params).unwrap();
        let g = params.mean.grid.len();
        let mut rng = seeded_rng(3, &[b"noise-test"]);
        let n_draws = 10_000;
        let probe = 50;
        let mut sumsq = 0.0;
        let mut sum = 0.0;
        for _ in 0..n_draws {
            let z = DVector::from_fn(g, |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let v = (&chol * z)[probe];
            sum += v;
            sumsq += v * v;
        }
        let var = sumsq / n_draws as f64 - (sum / n_draws as f64).powi(2);
        let expect = 0.323143;
        assert!(
            (var - expect).abs() / expect < 0.05,
            "empirical variance {var}"
        );
    }

    #[test]
    fn generator_linearity_in_covariates() {
        let params = default_params();
        let mut no_beta = params.clone();
        no_beta.beta_a.fill(0.0);
        let scenario = tiny_scenario();
        let full = generate_dataset(&params, &scenario, 5).unwrap();
        let base = generate_dataset(&no_beta, &scenario, 5).unwrap();
        let grid = params.mean.grid.clone();
        for (i, key) in full.train.keys.iter().enumerate() {
            let x = &full.train.covariates.rows[&(key.subject_id.clone(), key.side)];
            let mut shift = DMatrix::zeros(N_DIMS, grid.len());
            for k in 0..N_SCORES {
                let effect: f64 = (0..x.len()).map(|a| x[a] * params.beta_a[(k, a)]).sum();
                shift += params.psi(k, &grid) * effect;
            }
            let diff = &full.train.curves[i] - &base.train.curves[i] - shift;
            assert!(diff.amax() < 1e-8, "obs {i}: {}", diff.amax());
        }
    }

    #[test]
    fn zero_randomness_gives_fixed_surface() {
        let mut params = default_params();
        params.q_diag.fill(0.0);
        params.r_diag.fill(0.0);
        for s in params.s.iter_mut() {
            *s = 0.0;
        }
        params.noise.sigma = 0.0;
        // Five strides per side puts every T on the 101-point truth grid.
        let mut scenario = tiny_scenario();
        scenario.n_per_side = 5;
        let gen = generate_dataset(&params, &scenario, 9).unwrap();
        let truth = fixed_truth(&params);
        for (i, key) in gen.train.keys.iter().enumerate() {
            let x = &gen.train.covariates.rows[&(key.subject_id.clone(), key.side)];
            // Expected curve: mean + beta0 slice at T + covariate effects.
            let col = truth
                .big_t_grid
                .iter()
                .position(|&t| (t - key.long_time).abs() < 1e-9)
                .expect("T on the truth grid");
            for p in 0..N_DIMS {
                for g in 0..gen.train.grid.len() {
                    let mut expect = truth.intercept[p][(g, col)];
                    for (a, &xa) in x.iter().enumerate() {
                        expect += xa * truth.covariate_curves[a][(p, g)];
                    }
                    assert_abs_diff_eq!(gen.train.curves[i][(p, g)], expect, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn scale_strength_examples() {
        let mut params = default_params();
        for (d, v) in [9.0, 4.0, 1.0].into_iter().enumerate() {
            params.q_diag[(0, d)] = v;
        }
        let doubled = scale_strength(&params, 2.0);
        assert_eq!(doubled.q_diag[(0, 0)], 9.0);
        assert_eq!(doubled.q_diag[(0, 1)], 16.0);
        assert_eq!(doubled.q_diag[(0, 2)], 4.0);
        let same = scale_strength(&params, 1.0);
        assert_eq!(same.q_diag, params.q_diag);
        let tripled = scale_strength(&params, 3.0);
        assert_abs_diff_eq!(
            tripled.q_diag[(0, 1)].sqrt(),
            3.0 * params.q_diag[(0, 1)].sqrt(),
            epsilon = 1e-12
        );
        assert_eq!(tripled.s, params.s);
    }

    #[test]
    fn ise_and_ispe_basics() {
        let t_grid: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let zero = DMatrix::zeros(3, 101);
        let ones = DMatrix::from_element(3, 101, 1.0);
        // Constant offset 1 on 3 dimensions integrates to 3.
        assert_abs_diff_eq!(ise_curve(&ones, &zero, &t_grid).unwrap(), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ise_curve(&zero, &zero, &t_grid).unwrap(), 0.0, epsilon = 1e-15);
        // Doubling the error quadruples the ISE.
        let twos = DMatrix::from_element(3, 101, 2.0);
        assert_abs_diff_eq!(ise_curve(&twos, &zero, &t_grid).unwrap(), 12.0, epsilon = 1e-12);
        // ISPE with the same semantics.
        let a = MvCurve {
            values: ones.clone(),
            grid: t_grid.clone(),
        };
        let b = MvCurve {
            values: zero.clone(),
            grid: t_grid.clone(),
        };
        assert_abs_diff_eq!(ispe(&a, &b).unwrap(), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ispe(&a, &a).unwrap(), 0.0, epsilon = 1e-15);
        // Grid mismatch is an error.
        let short = MvCurve {
            values: DMatrix::zeros(3, 11),
            grid: (0..11).map(|i| i as f64).collect(),
        };
        assert!(ispe(&a, &short).is_err());
    }

    #[test]
    fn ise_matches_dense_reference() {
        // Smooth error field: trapezoid on 101 points within 1e-4 relative
        // of a 10001-point reference.
        let dense: Vec<f64> = (0..10001).map(|i| i as f64 / 100.0).collect();
        let coarse: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let f = |t: f64| (t / 17.0).sin() + 0.3 * (t / 5.0).cos();
        let est_c = DMatrix::from_fn(1, 101, |_, c| f(coarse[c]));
        let zero_c = DMatrix::zeros(1, 101);
        let est_d = DMatrix::from_fn(1, 10001, |_, c| f(dense[c]));
        let zero_d = DMatrix::zeros(1, 10001);
        let coarse_val = ise_curve(&est_c, &zero_c, &coarse).unwrap();
        let dense_val = ise_curve(&est_d, &zero_d, &dense).unwrap();
        assert!(
            (coarse_val - dense_val).abs() / dense_val < 1e-4,
            "coarse {coarse_val} dense {dense_val}"
        );
    }

    #[test]
    fn marginal_covariance_properties() {
        let params = default_params();
        // Zero fixed effects: scores marginally uncorrelated.
        let mut zf = params.clone();
        zf.beta0.fill(0.0);
        zf.beta_a.fill(0.0);
        let cov = marginal_score_covariance(&zf, 100_000, 13);
        let mut max_corr = 0.0f64;
        for i in 0..N_SCORES {
            for j in 0..N_SCORES {
                if i != j {
                    let c = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
                    max_corr = max_corr.max(c.abs());
                }
            }
        }
        assert!(max_corr < 0.02, "max off-diagonal correlation {max_corr}");
        // Generator values: covariate effects induce correlations.
        let cov_full = marginal_score_covariance(&params, 100_000, 13);
        let mut max_full = 0.0f64;
        for i in 0..N_SCORES {
            for j in 0..N_SCORES {
                if i != j {
                    let c = cov_full[(i, j)] / (cov_full[(i, i)] * cov_full[(j, j)]).sqrt();
                    max_full = max_full.max(c.abs());
                }
            }
        }
        assert!(max_full > 0.02, "expected correlation, got {max_full}");
    }

    #[test]
    fn recovery_identity_rotation() {
        // With fixed effects zeroed the marginal covariance is diagonal, so
        // the rotated basis equals the raw basis up to signs.
        let params = default_params();
        let res = recovery_study(&params, RecoveryMode::ZeroFixed, 2, 8, 21).unwrap();
        let w = params.block_gram();
        for k in 0..N_SCORES {
            let raw = res.generating_basis.row(k).transpose();
            let rot = res.rotated_basis.row(k).transpose();
            let overlap = (raw.transpose() * &w * &rot)[(0, 0)].abs();
            assert!(overlap > 0.999, "component {k}: |overlap| = {overlap}");
        }
    }

    #[test]
    fn run_replicate_smoke() {
        let params = default_params();
        let scenario = ScenarioConfig {
            n_subjects: 8,
            n_per_side: 8,
            missing_prop: 0.25,
            strength: 1.0,
            models: vec![ModelVariant::Naive, ModelVariant::Polynomial],
            pve: 0.9,
            replicates: 1,
            seed: 3,
            test_per_side: 2,
            fit_opts: Default::default(),
        };
        let metrics = run_replicate(&params, &scenario, 0).unwrap();
        assert_eq!(metrics.variants.len(), 2);
        for v in &metrics.variants {
            assert!(v.error.is_none(), "{:?}", v.error);
            assert!(v.ise_beta0.is_finite() && v.ise_beta0 >= 0.0);
            assert!(v.mean_ispe.is_finite() && v.mean_ispe >= 0.0);
            assert!(v.k_used >= 1);
        }
    }
}
