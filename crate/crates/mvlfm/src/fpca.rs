//! Pooled multivariate FPCA of basis-expanded curves, truncation selection,
//! cross-validated variance explained and the two-level method-of-moments
//! FPCA used to estimate longitudinal bases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{fit_coefficients, BasisError, GramMatrix, UnivariateBasis};
use crate::data::{MvCurve, MvLongDataset, ObservationKey, Side};
use crate::rng::seeded_rng;
use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum FpcaError {
    #[error("basis error: {0}")]
    Basis(#[from] BasisError),
    #[error("need at least two observations")]
    TooFewObservations,
    #[error("gram matrix is not positive semi-definite")]
    NonPsdGram,
    #[error("empty eigenvalue spectrum")]
    EmptySpectrum,
    #[error("grid mismatch between dataset and model")]
    GridMismatch,
    #[error("score width {0} does not match model truncation {1}")]
    WidthMismatch(usize, usize),
    #[error("fewer subjects ({0}) than folds ({1})")]
    TooFewSubjects(usize, usize),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Truncation {
    Pve(f64),
    K(usize),
}

/// A fitted pooled mv-FPCA basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvFpcaModel {
    pub mean: MvCurve,
    pub dim_names: Vec<String>,
    pub basis: UnivariateBasis,
    /// K x (P * B): spline coefficients of each eigenfunction, dimensions stacked.
    pub eig_coefs: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Cumulative proportion of variance explained, one entry per retained component.
    pub pve: Vec<f64>,
    /// Per-dimension Gram matrix (the full weight is block-diagonal with P copies).
    pub gram: GramMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTable {
    /// N_Total x K.
    pub scores: DMatrix<f64>,
    pub keys: Vec<ObservationKey>,
}

impl MvFpcaModel {
    pub fn k(&self) -> usize {
        self.eig_coefs.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.dim_names.len()
    }

    /// Block-diagonal weight matrix W (P blocks of the per-dimension Gram).
    pub fn block_gram(&self) -> DMatrix<f64> {
        block_diag(&self.gram.entries, self.n_dims())
    }

    /// Eigenfunction k evaluated on a t-grid: P x |grid| matrix.
    pub fn eigenfunction(&self, k: usize, grid: &[f64]) -> DMatrix<f64> {
        let design = self.basis.eval(grid).expect("grid within basis domain");
        let b = self.basis.n_basis();
        let p = self.n_dims();
        let mut out = DMatrix::zeros(p, grid.len());
        for pi in 0..p {
            let coefs = self.eig_coefs.view((k, pi * b), (1, b)).transpose();
            let vals = &design * coefs;
            for g in 0..grid.len() {
                out[(pi, g)] = vals[g];
            }
        }
        out
    }
}

pub(crate) fn block_diag(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let b = block.nrows();
    let mut out = DMatrix::zeros(b * copies, b * copies);
    for c in 0..copies {
        out.view_mut((c * b, c * b), (b, b)).copy_from(block);
    }
    out
}

/// Symmetric square root (and its inverse) with an eigenvalue floor.
fn sym_sqrt(w: &DMatrix<f64>, floor: f64) -> Result<(DMatrix<f64>, DMatrix<f64>), FpcaError> {
    let eig = w.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v < -1e-8) {
        return Err(FpcaError::NonPsdGram);
    }
    let mut half = DMatrix::zeros(w.nrows(), w.ncols());
    let mut inv_half = DMatrix::zeros(w.nrows(), w.ncols());
    for i in 0..w.nrows() {
        let v = eig.eigenvalues[i].max(floor);
        let q = eig.eigenvectors.column(i);
        half.ger(v.sqrt(), &q, &q, 1.0);
        inv_half.ger(1.0 / v.sqrt(), &q, &q, 1.0);
    }
    Ok((half, inv_half))
}

/// Smallest K whose cumulative proportion of variance reaches the threshold.
pub fn choose_k(eigenvalues: &[f64], pve_threshold: f64) -> Result<usize, FpcaError> {
    if eigenvalues.is_empty() {
        return Err(FpcaError::EmptySpectrum);
    }
    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    for (i, &l) in eigenvalues.iter().enumerate() {
        acc += l;
        if acc / total >= pve_threshold - 1e-12 {
            return Ok(i + 1);
        }
    }
    Ok(eigenvalues.len())
}

/// Stack per-dimension OLS coefficients into the N x (P*B) matrix.
pub fn stacked_coefficients(
    ds: &MvLongDataset,
    basis: &UnivariateBasis,
) -> Result<DMatrix<f64>, FpcaError> {
    let per_dim = fit_coefficients(ds, basis)?;
    let b = basis.n_basis();
    let p = ds.n_dims();
    let mut xi = DMatrix::zeros(ds.n_total(), p * b);
    for (pi, m) in per_dim.iter().enumerate() {
        xi.view_mut((0, pi * b), (ds.n_total(), b)).copy_from(m);
    }
    Ok(xi)
}

/// Pooled mv-FPCA of a centred dataset: weighted PCA of the stacked spline
/// coefficients, eigenfunctions orthonormal under the block Gram.
pub fn pooled_mvfpca(
    centered: &MvLongDataset,
    basis: &UnivariateBasis,
    truncation: Truncation,
) -> Result<(MvFpcaModel, ScoreTable), FpcaError> {
    if centered.n_total() < 2 {
        return Err(FpcaError::TooFewObservations);
    }
    let xi = stacked_coefficients(centered, basis)?;
    let gram = basis.gram();
    let p = centered.n_dims();
    let w = block_diag(&gram.entries, p);
    let (w_half, w_inv_half) = sym_sqrt(&w, 1e-12)?;

    let n = centered.n_total() as f64;
    let cov = xi.transpose() * &xi / (n - 1.0);
    let m = &w_half * cov * &w_half;
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let dim = eig.eigenvectors.nrows();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let positive: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > 1e-12)
        .collect();
    let eigenvalues: Vec<f64> = positive.iter().map(|&i| eig.eigenvalues[i]).collect();
    let k = match truncation {
        Truncation::Pve(p) => choose_k(&eigenvalues, p)?,
        Truncation::K(k) => k.min(eigenvalues.len()),
    };

    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    let pve: Vec<f64> = eigenvalues
        .iter()
        .take(k)
        .map(|&l| {
            acc += l;
            acc / total
        })
        .collect();

    let mut eig_coefs = DMatrix::zeros(k, dim);
    for (row, &i) in positive.iter().take(k).enumerate() {
        let c = &w_inv_half * eig.eigenvectors.column(i);
        // Sign convention: largest-magnitude spline coefficient positive.
        let mut max_abs = 0.0;
        let mut sign = 1.0;
        for &v in c.iter() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                sign = v.signum();
            }
        }
        for j in 0..dim {
            eig_coefs[(row, j)] = sign * c[j];
        }
    }

    let mean = MvCurve::new(
        DMatrix::zeros(p, centered.n_grid()),
        centered.grid.clone(),
    );
    let model = MvFpcaModel {
        mean,
        dim_names: centered.dim_names.clone(),
        basis: basis.clone(),
        eig_coefs,
        eigenvalues: eigenvalues[..k].to_vec(),
        pve,
        gram,
    };
    // scores = Xi W c_k
    let scores = xi * &w * model.eig_coefs.transpose();
    Ok((
        model.clone(),
        ScoreTable {
            scores,
            keys: centered.keys.clone(),
        },
    ))
}

/// As `pooled_mvfpca` but centring internally and storing the mean on the model.
pub fn fit_mvfpca(
    ds: &MvLongDataset,
    basis: &UnivariateBasis,
    truncation: Truncation,
) -> Result<(MvFpcaModel, ScoreTable), FpcaError> {
    let (mean, centered) = crate::data::center_dataset(ds)
        .map_err(|_| FpcaError::TooFewObservations)?;
    let (mut model, scores) = pooled_mvfpca(&centered, basis, truncation)?;
    model.mean = mean;
    Ok((model, scores))
}

/// Project a dataset (on the model grid) onto the fitted eigenfunctions.
pub fn project_scores(ds: &MvLongDataset, model: &MvFpcaModel) -> Result<ScoreTable, FpcaError> {
    if ds.grid.len() != model.mean.grid.len()
        || ds
            .grid
            .iter()
            .zip(&model.mean.grid)
            .any(|(a, b)| (a - b).abs() > 1e-10)
    {
        return Err(FpcaError::GridMismatch);
    }
    let centered = MvLongDataset {
        curves: ds.curves.iter().map(|c| c - &model.mean.values).collect(),
        ..ds.clone()
    };
    let xi = stacked_coefficients(&centered, &model.basis)?;
    let w = model.block_gram();
    let scores = xi * w * model.eig_coefs.transpose();
    Ok(ScoreTable {
        scores,
        keys: ds.keys.clone(),
    })
}

/// mean + sum_k score_k psi_k on the model grid.
pub fn reconstruct_curves(
    model: &MvFpcaModel,
    scores: &ScoreTable,
) -> Result<Vec<MvCurve>, FpcaError> {
    if scores.scores.ncols() != model.k() {
        return Err(FpcaError::WidthMismatch(scores.scores.ncols(), model.k()));
    }
    let grid = &model.mean.grid;
    let psi: Vec<DMatrix<f64>> = (0..model.k())
        .map(|k| model.eigenfunction(k, grid))
        .collect();
    let mut out = Vec::with_capacity(scores.scores.nrows());
    for i in 0..scores.scores.nrows() {
        let mut vals = model.mean.values.clone();
        for k in 0..model.k() {
            vals += &psi[k] * scores.scores[(i, k)];
        }
        out.push(MvCurve::new(vals, grid.clone()));
    }
    Ok(out)
}

fn sum_sq(ds: &MvLongDataset, reference: &DMatrix<f64>) -> f64 {
    ds.curves
        .iter()
        .map(|c| (c - reference).iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Grouped K-fold cross-validated PVE: subjects partitioned into folds, each
/// fold projected onto the model fitted on its complement.
pub fn grouped_cv_pve(
    ds: &MvLongDataset,
    basis: &UnivariateBasis,
    folds: usize,
    truncation: Truncation,
    seed: u64,
) -> Result<f64, FpcaError> {
    let subjects = ds.subject_ids();
    if subjects.len() < folds || folds < 2 {
        return Err(FpcaError::TooFewSubjects(subjects.len(), folds));
    }
    let mut shuffled = subjects.clone();
    let mut rng = seeded_rng(seed, &[b"cv_folds"]);
    shuffled.shuffle(&mut rng);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for f in 0..folds {
        let holdout: Vec<&String> = shuffled.iter().skip(f).step_by(folds).collect();
        let (train_rows, test_rows): (Vec<usize>, Vec<usize>) =
            (0..ds.n_total()).partition(|&i| !holdout.contains(&&ds.keys[i].subject_id));
        let train = ds.subset(&train_rows);
        let test = ds.subset(&test_rows);
        let (model, _) = fit_mvfpca(&train, basis, truncation)?;
        let scores = project_scores(&test, &model)?;
        let recon = reconstruct_curves(&model, &scores)?;
        for (c, r) in test.curves.iter().zip(&recon) {
            ss_res += (c - &r.values).iter().map(|v| v * v).sum::<f64>();
        }
        ss_tot += sum_sq(&test, &model.mean.values);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Average within-subject PVE under leave-one-subject-out refits.
pub fn loso_within_subject_pve(
    ds: &MvLongDataset,
    basis: &UnivariateBasis,
    truncation: Truncation,
) -> Result<(f64, Vec<String>), FpcaError> {
    let subjects = ds.subject_ids();
    if subjects.len() < 2 {
        return Err(FpcaError::TooFewSubjects(subjects.len(), 2));
    }
    let mut pves = Vec::new();
    let mut excluded = Vec::new();
    for s in &subjects {
        let (train_rows, test_rows): (Vec<usize>, Vec<usize>) =
            (0..ds.n_total()).partition(|&i| &ds.keys[i].subject_id != s);
        let train = ds.subset(&train_rows);
        let test = ds.subset(&test_rows);
        let (model, _) = fit_mvfpca(&train, basis, truncation)?;
        let scores = project_scores(&test, &model)?;
        let recon = reconstruct_curves(&model, &scores)?;
        let mut res = 0.0;
        for (c, r) in test.curves.iter().zip(&recon) {
            res += (c - &r.values).iter().map(|v| v * v).sum::<f64>();
        }
        let tot = sum_sq(&test, &model.mean.values);
        if tot <= 1e-12 {
            excluded.push(s.clone());
            continue;
        }
        pves.push(1.0 - res / tot);
    }
    Ok((pves.iter().sum::<f64>() / pves.len() as f64, excluded))
}

// ---------------------------------------------------------------------------
// Two-level (multilevel) FPCA of score trajectories
// ---------------------------------------------------------------------------

/// Longitudinal eigenfunctions at the subject and subject-and-side levels,
/// tabulated on a regular T-grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlFpcaBasis {
    pub t_grid: Vec<f64>,
    /// grid x r_u matrix of subject-level eigenfunctions.
    pub subject_funcs: DMatrix<f64>,
    pub subject_values: Vec<f64>,
    pub side_funcs: DMatrix<f64>,
    pub side_values: Vec<f64>,
    pub noise_var: f64,
    /// Subjects skipped for the cross-side covariance (single side observed).
    pub skipped_subjects: Vec<String>,
}

/// One detrended score trajectory: (T, value) pairs for a subject-side.
pub struct ScoreTrajectory {
    pub subject_id: String,
    pub side: Side,
    pub points: Vec<(f64, f64)>,
}

/// Method-of-moments two-level FPCA of detrended score trajectories binned to
/// a regular grid on [0, 1].
pub fn estimate_mlfpca_basis(
    trajectories: &[ScoreTrajectory],
    pve: f64,
    t_grid_size: usize,
) -> MlFpcaBasis {
    let g = t_grid_size;
    let t_grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
    let bin = |t: f64| -> usize {
        ((t.clamp(0.0, 1.0) * (g - 1) as f64).round() as usize).min(g - 1)
    };

    // Group trajectories by subject.
    let mut by_subject: std::collections::BTreeMap<&str, Vec<&ScoreTrajectory>> =
        std::collections::BTreeMap::new();
    for tr in trajectories {
        by_subject.entry(&tr.subject_id).or_default().push(tr);
    }

    // K_u from cross-side products within subject.
    let mut ku_sum: DMatrix<f64> = DMatrix::zeros(g, g);
    let mut ku_cnt: DMatrix<f64> = DMatrix::zeros(g, g);
    let mut skipped = Vec::new();
    for (sid, trs) in &by_subject {
        if trs.len() < 2 {
            skipped.push(sid.to_string());
            continue;
        }
        for a in 0..trs.len() {
            for b in (a + 1)..trs.len() {
                for &(ta, va) in &trs[a].points {
                    for &(tb, vb) in &trs[b].points {
                        let (ia, ib) = (bin(ta), bin(tb));
                        ku_sum[(ia, ib)] += va * vb;
                        ku_cnt[(ia, ib)] += 1.0;
                        ku_sum[(ib, ia)] += va * vb;
                        ku_cnt[(ib, ia)] += 1.0;
                    }
                }
            }
        }
    }
    let mut ku: DMatrix<f64> = DMatrix::zeros(g, g);
    for i in 0..g {
        for j in 0..g {
            if ku_cnt[(i, j)] > 0.0 {
                ku[(i, j)] = ku_sum[(i, j)] / ku_cnt[(i, j)];
            }
        }
    }
    fill_unobserved_bins(&mut ku, &ku_cnt);

    // K_u + K_v from within-side, cross-stride products (distinct strides, so
    // the diagonal bins carry no measurement-noise term).
    let mut kw_sum: DMatrix<f64> = DMatrix::zeros(g, g);
    let mut kw_cnt: DMatrix<f64> = DMatrix::zeros(g, g);
    let mut diag_sq = 0.0f64;
    let mut diag_n = 0.0f64;
    for tr in trajectories {
        let pts = &tr.points;
        for a in 0..pts.len() {
            diag_sq += pts[a].1 * pts[a].1;
            diag_n += 1.0;
            for b in (a + 1)..pts.len() {
                let (ia, ib) = (bin(pts[a].0), bin(pts[b].0));
                kw_sum[(ia, ib)] += pts[a].1 * pts[b].1;
                kw_cnt[(ia, ib)] += 1.0;
                kw_sum[(ib, ia)] += pts[a].1 * pts[b].1;
                kw_cnt[(ib, ia)] += 1.0;
            }
        }
    }
    let mut kw: DMatrix<f64> = DMatrix::zeros(g, g);
    for i in 0..g {
        for j in 0..g {
            if kw_cnt[(i, j)] > 0.0 {
                kw[(i, j)] = kw_sum[(i, j)] / kw_cnt[(i, j)];
            }
        }
    }
    fill_unobserved_bins(&mut kw, &kw_cnt);
    let kv = &kw - &ku;

    // Noise variance: same-stride mean square minus the within-side surface
    // diagonal, floored at zero. Cross-stride products exclude the noise term,
    // so the filled kw diagonal is noise-free.
    let mean_diag_kw = kw.trace() / g as f64;
    let noise_var = (diag_sq / diag_n.max(1.0) - mean_diag_kw).max(0.0);

    let (subject_funcs, subject_values) = truncated_eig(&ku, pve);
    let (side_funcs, side_values) = truncated_eig(&kv, pve);

    MlFpcaBasis {
        t_grid,
        subject_funcs,
        subject_values,
        side_funcs,
        side_values,
        noise_var,
        skipped_subjects: skipped,
    }
}

/// Fill surface bins that no observation pair hit with the average of the
/// nearest populated entries (smallest Chebyshev radius). The observed
/// longitudinal times need not cover the estimation grid, and leaving the
/// unhit bins at zero would interleave spurious zeros into the surface.
fn fill_unobserved_bins(k: &mut DMatrix<f64>, cnt: &DMatrix<f64>) {
    let g = k.nrows() as isize;
    for i in 0..g {
        for j in 0..g {
            if cnt[(i as usize, j as usize)] > 0.0 {
                continue;
            }
            'radius: for rad in 1..g {
                let mut sum = 0.0;
                let mut n = 0.0;
                for di in -rad..=rad {
                    for dj in -rad..=rad {
                        if di.abs().max(dj.abs()) != rad {
                            continue;
                        }
                        let (a, b) = (i + di, j + dj);
                        if (0..g).contains(&a)
                            && (0..g).contains(&b)
                            && cnt[(a as usize, b as usize)] > 0.0
                        {
                            sum += k[(a as usize, b as usize)];
                            n += 1.0;
                        }
                    }
                }
                if n > 0.0 {
                    k[(i as usize, j as usize)] = sum / n;
                    break 'radius;
                }
            }
        }
    }
}

/// Eigendecompose a (possibly indefinite MoM) covariance surface, truncate
/// negative eigenvalues at zero, keep components to reach `pve`.
fn truncated_eig(k: &DMatrix<f64>, pve: f64) -> (DMatrix<f64>, Vec<f64>) {
    let g = k.nrows();
    let sym = (k + k.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let values: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .filter(|&v| v > 1e-12)
        .collect();
    if values.is_empty() {
        return (DMatrix::zeros(g, 1), vec![0.0]);
    }
    let total: f64 = values.iter().sum();
    let mut keep = values.len();
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if acc / total >= pve - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    // MoM spectra carry a noise tail whose scale shows up as negative
    // eigenvalues of the (indefinite) estimate: keep only components that
    // rise above the most negative eigenvalue's magnitude.
    let neg_floor = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(-v));
    let above = values.iter().take_while(|&&v| v > 0.5 * neg_floor).count().max(1);
    keep = keep.min(above);
    let mut funcs = DMatrix::zeros(g, keep);
    for (col, &i) in order.iter().take(keep).enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        // Sign: largest-magnitude entry positive.
        let mut max_abs = 0.0;
        let mut sign = 1.0;
        for &x in v.iter() {
            if x.abs() > max_abs {
                max_abs = x.abs();
                sign = x.signum();
            }
        }
        v *= sign;
        funcs.set_column(col, &v);
    }
    (funcs, values[..keep].to_vec())
}

/// Group detrended per-observation values into subject-side trajectories.
pub fn score_trajectories(keys: &[ObservationKey], residuals: &DVector<f64>) -> Vec<ScoreTrajectory> {
    let mut by_group: std::collections::BTreeMap<(String, Side), Vec<(f64, f64)>> =
        std::collections::BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        by_group
            .entry((k.subject_id.clone(), k.side))
            .or_default()
            .push((k.long_time, residuals[i]));
    }
    by_group
        .into_iter()
        .map(|((subject_id, side), points)| ScoreTrajectory {
            subject_id,
            side,
            points,
        })
        .collect()
}
