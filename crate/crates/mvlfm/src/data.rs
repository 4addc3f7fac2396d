//! Representation and ingestion of multivariate longitudinal functional datasets.
//!
//! An observation is one stride: a multivariate curve (P dimensions on a shared
//! grid) keyed by subject, side, stride index and longitudinal time T. Datasets
//! are immutable after construction and safe to share across threads.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded_rng;
use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unresolved covariates for {0} ({1})")]
    UnresolvedCovariates(String, Side),
    #[error("ragged grid: curve {0}/{1}/stride {2} has {3} points, expected {4}")]
    RaggedGrid(String, Side, u32, usize, usize),
    #[error("duplicate row for {0}/{1}/stride {2}, dimension {3}, t = {4}")]
    DuplicateRow(String, Side, u32, String, f64),
    #[error("non-finite value at {0}/{1}/stride {2}")]
    NonFinite(String, Side, u32),
    #[error("covariate row for {0}/{1} not constant across strides")]
    InconsistentCovariates(String, Side),
    #[error("subject {0} has zero maximum longitudinal time")]
    ZeroMaxTime(String),
    #[error("longitudinal time must be non-negative (subject {0})")]
    NegativeTime(String),
    #[error("longitudinal time not increasing with stride index for {0}/{1}")]
    NonMonotoneTime(String, Side),
    #[error("holdout_per_side must be >= 1")]
    InvalidHoldout,
    #[error("dataset must contain at least {0} observations")]
    TooFewObservations(usize),
    #[error("invalid side label: {0}")]
    InvalidSide(String),
    #[error("malformed curve file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(DataError::InvalidSide(other.to_string())),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Left => write!(f, "left"),
            Side::Right => write!(f, "right"),
        }
    }
}

/// A multivariate curve: P dimensions evaluated on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvCurve {
    /// P x G matrix of curve values.
    pub values: DMatrix<f64>,
    /// G strictly increasing grid points.
    pub grid: Vec<f64>,
}

impl MvCurve {
    pub fn new(values: DMatrix<f64>, grid: Vec<f64>) -> Self {
        assert_eq!(values.ncols(), grid.len(), "grid length mismatch");
        MvCurve { values, grid }
    }

    pub fn n_dims(&self) -> usize {
        self.values.nrows()
    }

    pub fn zero_like(&self) -> Self {
        MvCurve {
            values: DMatrix::zeros(self.values.nrows(), self.values.ncols()),
            grid: self.grid.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationKey {
    pub subject_id: String,
    pub side: Side,
    pub stride_index: u32,
    pub long_time: f64,
}

/// Per-(subject, side) scalar covariates, constant across strides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub rows: BTreeMap<(String, Side), Vec<f64>>,
}

impl CovariateTable {
    pub fn get(&self, subject_id: &str, side: Side) -> Option<&Vec<f64>> {
        self.rows.get(&(subject_id.to_string(), side))
    }
}

/// A validated multivariate longitudinal functional dataset.
///
/// Curves are stored as P x G matrices on the shared `grid`; `keys` is parallel
/// to `curves`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvLongDataset {
    pub grid: Vec<f64>,
    pub dim_names: Vec<String>,
    pub curves: Vec<DMatrix<f64>>,
    pub keys: Vec<ObservationKey>,
    pub covariates: CovariateTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exclusion {
    pub subject_id: String,
    pub reason: String,
}

impl MvLongDataset {
    pub fn n_total(&self) -> usize {
        self.curves.len()
    }

    pub fn n_dims(&self) -> usize {
        self.dim_names.len()
    }

    pub fn n_grid(&self) -> usize {
        self.grid.len()
    }

    /// Distinct subject ids in sorted order.
    pub fn subject_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.keys.iter().map(|k| k.subject_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Distinct (subject, side) pairs in sorted order.
    pub fn subject_sides(&self) -> Vec<(String, Side)> {
        let mut ids: Vec<(String, Side)> = self
            .keys
            .iter()
            .map(|k| (k.subject_id.clone(), k.side))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let g = self.grid.len();
        let p = self.dim_names.len();
        for (curve, key) in self.curves.iter().zip(&self.keys) {
            if curve.ncols() != g || curve.nrows() != p {
                return Err(DataError::RaggedGrid(
                    key.subject_id.clone(),
                    key.side,
                    key.stride_index,
                    curve.ncols(),
                    g,
                ));
            }
            if curve.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite(
                    key.subject_id.clone(),
                    key.side,
                    key.stride_index,
                ));
            }
            if self
                .covariates
                .get(&key.subject_id, key.side)
                .is_none()
            {
                return Err(DataError::UnresolvedCovariates(
                    key.subject_id.clone(),
                    key.side,
                ));
            }
        }
        // T strictly increasing with stride index within subject-side.
        let mut by_group: BTreeMap<(String, Side), Vec<(u32, f64)>> = BTreeMap::new();
        for k in &self.keys {
            by_group
                .entry((k.subject_id.clone(), k.side))
                .or_default()
                .push((k.stride_index, k.long_time));
        }
        for ((sid, side), mut seq) in by_group {
            seq.sort_by_key(|&(l, _)| l);
            for w in seq.windows(2) {
                if w[1].1 <= w[0].1 {
                    return Err(DataError::NonMonotoneTime(sid, side));
                }
            }
        }
        Ok(())
    }

    /// Restrict to the given row indices (cloning curves and keys).
    pub fn subset(&self, rows: &[usize]) -> MvLongDataset {
        MvLongDataset {
            grid: self.grid.clone(),
            dim_names: self.dim_names.clone(),
            curves: rows.iter().map(|&r| self.curves[r].clone()).collect(),
            keys: rows.iter().map(|&r| self.keys[r].clone()).collect(),
            covariates: self.covariates.clone(),
        }
    }
}

/// Load a dataset from the long-format curve CSV and the covariate CSV.
///
/// Curve CSV header: `subject_id,side,stride,T_raw,dimension,t,value`.
/// Covariate CSV header: `subject_id,side,<name1>,...,<nameA>`.
pub fn load_dataset(
    curve_file: &Path,
    covariate_file: &Path,
) -> Result<MvLongDataset, DataError> {
    let covariates = load_covariates(covariate_file)?;

    let mut rdr = csv::Reader::from_path(curve_file)?;
    {
        let hdr = rdr.headers()?;
        let expected = ["subject_id", "side", "stride", "T_raw", "dimension", "t", "value"];
        if hdr.len() != expected.len() || hdr.iter().zip(expected).any(|(a, b)| a != b) {
            return Err(DataError::Malformed(format!(
                "unexpected curve header: {:?}",
                hdr
            )));
        }
    }

    // (subject, side, stride) -> (T, dim -> Vec<(t, value)>)
    type StrideRows = (f64, BTreeMap<String, Vec<(f64, f64)>>);
    let mut groups: BTreeMap<(String, Side, u32), StrideRows> = BTreeMap::new();
    let mut dim_names: Vec<String> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let sid = rec[0].to_string();
        let side = Side::parse(&rec[1])?;
        let stride: u32 = rec[2]
            .parse()
            .map_err(|_| DataError::Malformed(format!("bad stride: {}", &rec[2])))?;
        let t_raw: f64 = rec[3]
            .parse()
            .map_err(|_| DataError::Malformed(format!("bad T_raw: {}", &rec[3])))?;
        let dim = rec[4].to_string();
        let t: f64 = rec[5]
            .parse()
            .map_err(|_| DataError::Malformed(format!("bad t: {}", &rec[5])))?;
        let value: f64 = rec[6]
            .parse()
            .map_err(|_| DataError::Malformed(format!("bad value: {}", &rec[6])))?;
        if !dim_names.contains(&dim) {
            dim_names.push(dim.clone());
        }
        let entry = groups
            .entry((sid, side, stride))
            .or_insert_with(|| (t_raw, BTreeMap::new()));
        entry.0 = t_raw;
        entry.1.entry(dim).or_default().push((t, value));
    }

    // Infer the grid from the first curve's first dimension.
    let first = groups
        .values()
        .next()
        .ok_or_else(|| DataError::Malformed("empty curve file".into()))?;
    let grid: Vec<f64> = first
        .1
        .values()
        .next()
        .ok_or_else(|| DataError::Malformed("empty curve file".into()))?
        .iter()
        .map(|&(t, _)| t)
        .collect();
    let g = grid.len();
    let p = dim_names.len();

    let mut curves = Vec::with_capacity(groups.len());
    let mut keys = Vec::with_capacity(groups.len());
    for ((sid, side, stride), (t_raw, dims)) in groups {
        let mut values = DMatrix::zeros(p, g);
        for (pi, dname) in dim_names.iter().enumerate() {
            let rows = dims
                .get(dname)
                .ok_or_else(|| DataError::RaggedGrid(sid.clone(), side, stride, 0, g))?;
            if rows.len() != g {
                return Err(DataError::RaggedGrid(sid.clone(), side, stride, rows.len(), g));
            }
            for (gi, &(t, v)) in rows.iter().enumerate() {
                if (t - grid[gi]).abs() > 1e-9 {
                    // Either a duplicated t or a different grid.
                    if rows.iter().filter(|&&(tt, _)| (tt - t).abs() < 1e-12).count() > 1 {
                        return Err(DataError::DuplicateRow(
                            sid.clone(),
                            side,
                            stride,
                            dname.clone(),
                            t,
                        ));
                    }
                    return Err(DataError::RaggedGrid(sid.clone(), side, stride, rows.len(), g));
                }
                if !v.is_finite() {
                    return Err(DataError::NonFinite(sid.clone(), side, stride));
                }
                values[(pi, gi)] = v;
            }
        }
        curves.push(values);
        keys.push(ObservationKey {
            subject_id: sid,
            side,
            stride_index: stride,
            long_time: t_raw,
        });
    }

    let ds = MvLongDataset {
        grid,
        dim_names,
        curves,
        keys,
        covariates,
    };
    ds.validate()?;
    Ok(ds)
}

fn load_covariates(path: &Path) -> Result<CovariateTable, DataError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let names: Vec<String> = {
        let hdr = rdr.headers()?;
        if hdr.len() < 2 || &hdr[0] != "subject_id" || &hdr[1] != "side" {
            return Err(DataError::Malformed(format!(
                "unexpected covariate header: {:?}",
                hdr
            )));
        }
        hdr.iter().skip(2).map(|s| s.to_string()).collect()
    };
    let mut rows = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let sid = rec[0].to_string();
        let side = Side::parse(&rec[1])?;
        let vals: Result<Vec<f64>, _> = (2..rec.len()).map(|i| rec[i].parse::<f64>()).collect();
        let vals = vals.map_err(|_| DataError::Malformed(format!("bad covariate row for {sid}")))?;
        if rows.insert((sid.clone(), side), vals).is_some() {
            return Err(DataError::InconsistentCovariates(sid, side));
        }
    }
    Ok(CovariateTable { names, rows })
}

/// Write a dataset back to the long CSV format (round-trip exact).
pub fn write_dataset(ds: &MvLongDataset, curve_file: &Path) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_path(curve_file)?;
    wtr.write_record(["subject_id", "side", "stride", "T_raw", "dimension", "t", "value"])?;
    for (curve, key) in ds.curves.iter().zip(&ds.keys) {
        for (pi, dname) in ds.dim_names.iter().enumerate() {
            for (gi, &t) in ds.grid.iter().enumerate() {
                wtr.write_record([
                    key.subject_id.as_str(),
                    &key.side.to_string(),
                    &key.stride_index.to_string(),
                    &format!("{}", key.long_time),
                    dname,
                    &format!("{}", t),
                    &format!("{}", curve[(pi, gi)]),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_covariates(table: &CovariateTable, path: &Path) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_path(path)?;
    let mut hdr = vec!["subject_id".to_string(), "side".to_string()];
    hdr.extend(table.names.iter().cloned());
    wtr.write_record(&hdr)?;
    for ((sid, side), vals) in &table.rows {
        let mut rec = vec![sid.clone(), side.to_string()];
        rec.extend(vals.iter().map(|v| format!("{}", v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Normalise longitudinal time per subject: T <- T / max_subject(T).
pub fn normalize_long_time(ds: &MvLongDataset) -> Result<MvLongDataset, DataError> {
    let mut max_t: BTreeMap<&str, f64> = BTreeMap::new();
    for k in &ds.keys {
        if k.long_time < 0.0 {
            return Err(DataError::NegativeTime(k.subject_id.clone()));
        }
        let e = max_t.entry(&k.subject_id).or_insert(0.0);
        if k.long_time > *e {
            *e = k.long_time;
        }
    }
    for (sid, &m) in &max_t {
        if m <= 0.0 {
            return Err(DataError::ZeroMaxTime(sid.to_string()));
        }
    }
    let keys = ds
        .keys
        .iter()
        .map(|k| ObservationKey {
            long_time: k.long_time / max_t[k.subject_id.as_str()],
            ..k.clone()
        })
        .collect();
    Ok(MvLongDataset {
        keys,
        ..ds.clone()
    })
}

/// Subtract the pooled pointwise mean per dimension.
pub fn center_dataset(ds: &MvLongDataset) -> Result<(MvCurve, MvLongDataset), DataError> {
    if ds.n_total() < 2 {
        return Err(DataError::TooFewObservations(2));
    }
    let p = ds.n_dims();
    let g = ds.n_grid();
    let mut mean = DMatrix::zeros(p, g);
    for c in &ds.curves {
        mean += c;
    }
    mean /= ds.n_total() as f64;
    let curves = ds.curves.iter().map(|c| c - &mean).collect();
    Ok((
        MvCurve::new(mean, ds.grid.clone()),
        MvLongDataset {
            curves,
            ..ds.clone()
        },
    ))
}

/// Split off `holdout_per_side` strides per retained subject-side, uniformly at
/// random under `seed`. Subject-sides with fewer than twice the holdout are
/// excluded (and the whole subject reported).
pub fn split_test(
    ds: &MvLongDataset,
    holdout_per_side: usize,
    seed: u64,
) -> Result<(MvLongDataset, MvLongDataset, Vec<Exclusion>), DataError> {
    if holdout_per_side < 1 {
        return Err(DataError::InvalidHoldout);
    }
    let mut by_group: BTreeMap<(String, Side), Vec<usize>> = BTreeMap::new();
    for (i, k) in ds.keys.iter().enumerate() {
        by_group
            .entry((k.subject_id.clone(), k.side))
            .or_default()
            .push(i);
    }
    // A subject is excluded if any of its sides has < 2 * holdout strides.
    let mut excluded: Vec<Exclusion> = Vec::new();
    let mut excluded_ids: Vec<String> = Vec::new();
    for ((sid, _side), rows) in &by_group {
        if rows.len() < 2 * holdout_per_side && !excluded_ids.contains(sid) {
            excluded_ids.push(sid.clone());
            excluded.push(Exclusion {
                subject_id: sid.clone(),
                reason: format!(
                    "fewer than {} strides on one side",
                    2 * holdout_per_side
                ),
            });
        }
    }
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for ((sid, side), rows) in &by_group {
        if excluded_ids.contains(sid) {
            continue;
        }
        let mut rng = seeded_rng(seed, &[sid.as_bytes(), &[*side as u8]]);
        let mut pool = rows.clone();
        pool.shuffle(&mut rng);
        let (test, train) = pool.split_at(holdout_per_side);
        test_rows.extend_from_slice(test);
        train_rows.extend_from_slice(train);
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    Ok((ds.subset(&train_rows), ds.subset(&test_rows), excluded))
}
