//! Command-line front end: fit, simulate, predict, evaluate, bootstrap and
//! diagnose, all driven by JSON configs and emitting tidy CSV / JSON
//! artifacts. Every command is a pure function of its config and input
//! files; reruns reproduce outputs byte-identically.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvlfm::basis::bspline_basis;
use mvlfm::data::{
    load_dataset, normalize_long_time, split_test, write_covariates, write_dataset, DataError,
    MvLongDataset, ObservationKey, Side,
};
use mvlfm::fpca::{project_scores, MvFpcaModel, ScoreTable, Truncation};
use mvlfm::lmm::{build_design, residual_diagnostics, FitOpts, LongDesign, ScoreLmmFit};
use mvlfm::model::{
    bootstrap_fixed_effects, fit_model, fixed_effect_curve, longitudinal_coefficient_curves,
    predict_curve, simultaneous_band, LongitudinalBasis, MvLfmmFit, RandomBasisSource,
    ResolvedLevels,
};
use mvlfm::sim::{
    default_params, ispe, recovery_study, run_replicate, GeneratorParams, ModelVariant,
    RecoveryMode, ScenarioConfig, N_SCORES,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// CLI surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "mvlfm",
    about = "Multivariate multilevel longitudinal functional models",
    version
)]
struct Cli {
    /// Path to the command's JSON config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a dataset and write a fit bundle.
    Fit,
    /// Run a simulation scenario or a recovery study.
    Simulate,
    /// Predict curves for (subject, side, T, covariates) query rows.
    Predict,
    /// Integrated squared prediction error of a fit bundle on a dataset.
    Evaluate,
    /// Bootstrap confidence bands for the covariate effect curves.
    Bootstrap,
    /// Residual and BLUP diagnostics of a fit bundle on its training data.
    Diagnose,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Fit(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Fit(_) => 4,
        }
    }
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Fit(_) => "fit",
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Fit(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn fit_err(e: impl std::fmt::Display) -> CliError {
    CliError::Fit(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("{}", error_json(&CliError::Config(e.to_string())));
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fit => run_fit(&cli),
        Command::Simulate => run_simulate(&cli),
        Command::Predict => run_predict(&cli),
        Command::Evaluate => run_evaluate(&cli),
        Command::Bootstrap => run_bootstrap(&cli),
        Command::Diagnose => run_diagnose(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(e.exit_code())
        }
    }
}

fn error_json(e: &CliError) -> String {
    serde_json::json!({ "error": e.message(), "kind": e.kind() }).to_string()
}

fn load_config<T: for<'de> Deserialize<'de>>(cli: &Cli) -> Result<T, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

fn ensure_out(cli: &Cli) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cli.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", cli.out.display())))?;
    Ok(cli.out.clone())
}

// ---------------------------------------------------------------------------
// Shared fit machinery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FuncBasisConfig {
    #[serde(default = "default_order")]
    order: usize,
    #[serde(default = "default_n_basis")]
    n_basis: usize,
}

fn default_order() -> usize {
    4
}
fn default_n_basis() -> usize {
    15
}

impl Default for FuncBasisConfig {
    fn default() -> Self {
        FuncBasisConfig {
            order: default_order(),
            n_basis: default_n_basis(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    curves: PathBuf,
    covariates: PathBuf,
    model: ModelVariant,
    #[serde(default = "default_pve")]
    pve: f64,
    /// Fixed truncation level; overrides `pve` when set.
    k: Option<usize>,
    #[serde(default)]
    func_basis: FuncBasisConfig,
    /// When set, hold out this many strides per subject-side before fitting.
    holdout_per_side: Option<usize>,
    #[serde(default)]
    seed: u64,
    /// Rescale each subject's longitudinal times to [0, 1].
    #[serde(default = "default_true")]
    normalize: bool,
    #[serde(default = "default_max_lag")]
    max_lag: usize,
}

fn default_pve() -> f64 {
    0.95
}
fn default_true() -> bool {
    true
}
fn default_max_lag() -> usize {
    10
}

fn load_and_prepare(
    curves: &Path,
    covariates: &Path,
    normalize: bool,
) -> Result<MvLongDataset, CliError> {
    let ds = load_dataset(curves, covariates)?;
    if normalize {
        Ok(normalize_long_time(&ds)?)
    } else {
        Ok(ds)
    }
}

fn fit_from_config(
    cfg: &FitConfig,
    seed_override: Option<u64>,
) -> Result<(MvLfmmFit, MvLongDataset, Option<MvLongDataset>), CliError> {
    let ds = load_and_prepare(&cfg.curves, &cfg.covariates, cfg.normalize)?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let (train, holdout) = match cfg.holdout_per_side {
        Some(h) => {
            let (train, test, _) = split_test(&ds, h, seed)?;
            (train, Some(test))
        }
        None => (ds, None),
    };
    let domain = (train.grid[0], train.grid[train.grid.len() - 1]);
    let func_basis = bspline_basis(cfg.func_basis.order, cfg.func_basis.n_basis, domain);
    let truncation = match cfg.k {
        Some(k) => Truncation::K(k),
        None => Truncation::Pve(cfg.pve),
    };
    let fit = fit_model(
        &train,
        &func_basis,
        &cfg.model.long_basis(),
        &cfg.model.covspec(),
        truncation,
        &FitOpts::default(),
    )
    .map_err(fit_err)?;
    Ok((fit, train, holdout))
}

// ---------------------------------------------------------------------------
// Fit bundle serialisation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMeta {
    model: ModelVariant,
    long_basis: LongitudinalBasis,
    levels: Vec<ResolvedLevels>,
    covariate_names: Vec<String>,
    mlfpca_noise: Option<Vec<f64>>,
    n_singular: usize,
    k: usize,
    pve: f64,
    n_train: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serialisation failed: {e}")))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("invalid JSON {}: {e}", path.display())))
}

fn write_bundle(
    out: &Path,
    fit: &MvLfmmFit,
    model: ModelVariant,
    n_train: usize,
) -> Result<(), CliError> {
    write_json(&out.join("fpca.json"), &fit.fpca)?;
    let fits_dir = out.join("fits");
    fs::create_dir_all(&fits_dir)?;
    for (k, f) in fit.fits.iter().enumerate() {
        write_json(&fits_dir.join(format!("k_{k:03}.json")), f)?;
    }
    let meta = BundleMeta {
        model,
        long_basis: fit.long_basis.clone(),
        levels: fit.levels.clone(),
        covariate_names: fit.covariate_names.clone(),
        mlfpca_noise: fit.mlfpca_noise.clone(),
        n_singular: fit.n_singular,
        k: fit.k(),
        pve: fit.fpca.pve.last().copied().unwrap_or(0.0),
        n_train,
    };
    write_json(&out.join("meta.json"), &meta)
}

fn read_bundle(bundle: &Path) -> Result<(MvLfmmFit, BundleMeta), CliError> {
    let fpca: MvFpcaModel = read_json(&bundle.join("fpca.json"))?;
    let meta: BundleMeta = read_json(&bundle.join("meta.json"))?;
    let mut fits: Vec<ScoreLmmFit> = Vec::with_capacity(meta.k);
    for k in 0..meta.k {
        fits.push(read_json(&bundle.join("fits").join(format!("k_{k:03}.json")))?);
    }
    let fit = MvLfmmFit {
        fpca,
        long_basis: meta.long_basis.clone(),
        levels: meta.levels.clone(),
        fits,
        covariate_names: meta.covariate_names.clone(),
        mlfpca_noise: meta.mlfpca_noise.clone(),
        n_singular: meta.n_singular,
    };
    Ok((fit, meta))
}

// ---------------------------------------------------------------------------
// Tidy exports shared by fit and diagnose
// ---------------------------------------------------------------------------

fn write_fixed_effects_csv(path: &Path, fit: &MvLfmmFit) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["effect", "dim", "t", "estimate", "variance"])?;
    let grid = fit.grid().to_vec();
    let mut emit = |name: &str, curve: &mvlfm::model::CurveWithVariance| -> Result<(), CliError> {
        for (p, dname) in fit.fpca.dim_names.iter().enumerate() {
            for (g, &t) in grid.iter().enumerate() {
                wtr.write_record([
                    name,
                    dname,
                    &format!("{t}"),
                    &format!("{}", curve.estimate[(p, g)]),
                    &format!("{}", curve.variance[(p, g)]),
                ])?;
            }
        }
        Ok(())
    };
    for (d, curve) in longitudinal_coefficient_curves(fit).iter().enumerate() {
        emit(&format!("long_{d}"), curve)?;
    }
    for (a, name) in fit.covariate_names.clone().iter().enumerate() {
        emit(name, &fixed_effect_curve(fit, a))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Rebuild the per-score mixed-model design exactly as fitting did.
fn design_for_score(
    fit: &MvLfmmFit,
    scores: &ScoreTable,
    train: &MvLongDataset,
    k: usize,
) -> Result<LongDesign, CliError> {
    let lb = LongitudinalBasis {
        fixed: fit.long_basis.fixed.clone(),
        subject: fit.levels[k].subject_basis.clone(),
        side: fit.levels[k].side_basis.clone(),
        random_source: RandomBasisSource::Shared,
    };
    build_design(scores, k, &train.covariates, &lb, &fit.levels[k].covspec).map_err(fit_err)
}

fn write_diagnostics_csv(
    path: &Path,
    fit: &MvLfmmFit,
    train: &MvLongDataset,
    max_lag: usize,
) -> Result<(), CliError> {
    let scores = project_scores(train, &fit.fpca).map_err(fit_err)?;
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["k", "stat", "column", "index", "value"])?;
    for k in 0..fit.k() {
        let design = design_for_score(fit, &scores, train, k)?;
        let diag = residual_diagnostics(&fit.fits[k], &design, max_lag);
        let mut emit = |stat: &str, column: usize, values: &[f64]| -> Result<(), CliError> {
            for (i, v) in values.iter().enumerate() {
                wtr.write_record([
                    &format!("{k}"),
                    stat,
                    &format!("{column}"),
                    &format!("{i}"),
                    &format!("{v}"),
                ])?;
            }
            Ok(())
        };
        emit("acf", 0, &diag.acf)?;
        emit("resid_q", 0, &diag.resid_quantiles)?;
        for (c, q) in diag.blup_u_quantiles.iter().enumerate() {
            emit("blup_u_q", c, q)?;
        }
        for (c, q) in diag.blup_v_quantiles.iter().enumerate() {
            emit("blup_v_q", c, q)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn run_fit(cli: &Cli) -> Result<(), CliError> {
    let cfg: FitConfig = load_config(cli)?;
    let out = ensure_out(cli)?;
    let (fit, train, holdout) = fit_from_config(&cfg, cli.seed)?;
    write_bundle(&out, &fit, cfg.model, train.keys.len())?;
    if let Some(test) = &holdout {
        write_dataset(test, &out.join("holdout_curves.csv"))?;
        write_covariates(&test.covariates, &out.join("holdout_covariates.csv"))?;
    }
    write_fixed_effects_csv(&out.join("fixed_effects.csv"), &fit)?;
    write_diagnostics_csv(&out.join("diagnostics.csv"), &fit, &train, cfg.max_lag)?;
    let mut wtr = csv::Writer::from_path(out.join("singular.csv"))?;
    wtr.write_record(["k", "singular"])?;
    for (k, f) in fit.fits.iter().enumerate() {
        wtr.write_record([format!("{k}"), format!("{}", f.singular)])?;
    }
    wtr.flush()?;
    let summary = serde_json::json!({
        "k": fit.k(),
        "pve": fit.fpca.pve.last().copied().unwrap_or(0.0),
        "n_singular": fit.n_singular,
        "n_train": train.keys.len(),
        "n_holdout": holdout.as_ref().map_or(0, |t| t.keys.len()),
    });
    println!("{summary}");
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Study {
    Metrics,
    Recovery {
        mode: RecoveryMode,
        n_replicates: usize,
        n_subjects: usize,
    },
}

impl Default for Study {
    fn default() -> Self {
        Study::Metrics
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default = "default_scenario_name")]
    name: String,
    /// Generator parameter file; the bundled defaults are used when absent.
    params_file: Option<PathBuf>,
    scenario: ScenarioConfig,
    #[serde(default)]
    study: Study,
    /// Report wall-clock phase timings in metrics.csv. Off by default so
    /// that reruns are byte-identical.
    #[serde(default)]
    wall_timings: bool,
}

fn default_scenario_name() -> String {
    "baseline".into()
}

fn load_params(cfg: &SimulateConfig) -> Result<GeneratorParams, CliError> {
    match &cfg.params_file {
        Some(path) => read_json(path),
        None => Ok(default_params()),
    }
}

fn run_simulate(cli: &Cli) -> Result<(), CliError> {
    let mut cfg: SimulateConfig = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.scenario.seed = seed;
    }
    let out = ensure_out(cli)?;
    let params = load_params(&cfg)?;
    match cfg.study.clone() {
        Study::Metrics => run_metrics_study(&cfg, &params, &out),
        Study::Recovery {
            mode,
            n_replicates,
            n_subjects,
        } => run_recovery_study(&cfg, &params, mode, n_replicates, n_subjects, &out),
    }
}

fn run_metrics_study(
    cfg: &SimulateConfig,
    params: &GeneratorParams,
    out: &Path,
) -> Result<(), CliError> {
    use rayon::prelude::*;
    let results: Vec<_> = (0..cfg.scenario.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(params, &cfg.scenario, rep))
        .collect();
    let mut wtr = csv::Writer::from_path(out.join("metrics.csv"))?;
    wtr.write_record([
        "scenario",
        "replicate",
        "model",
        "ise_beta0",
        "ise_beta1",
        "ise_beta2",
        "mean_ispe",
        "fpca_s",
        "fit_s",
        "singular_count",
        "K",
    ])?;
    let mut n_failed = 0;
    for (rep, result) in results.iter().enumerate() {
        match result {
            Ok(metrics) => {
                for v in &metrics.variants {
                    if let Some(err) = &v.error {
                        eprintln!("replicate {rep} model {}: {err}", v.model.name());
                    }
                    let (fpca_s, fit_s) = if cfg.wall_timings {
                        (v.fpca_seconds, v.fit_seconds)
                    } else {
                        (0.0, 0.0)
                    };
                    wtr.write_record([
                        cfg.name.clone(),
                        format!("{}", metrics.replicate),
                        v.model.name().to_string(),
                        format!("{}", v.ise_beta0),
                        format!("{}", v.ise_beta1),
                        format!("{}", v.ise_beta2),
                        format!("{}", v.mean_ispe),
                        format!("{fpca_s}"),
                        format!("{fit_s}"),
                        format!("{}", v.singular_count),
                        format!("{}", v.k_used),
                    ])?;
                }
            }
            Err(e) => {
                n_failed += 1;
                eprintln!("replicate {rep} failed: {e}");
            }
        }
    }
    wtr.flush()?;
    if n_failed == cfg.scenario.replicates && cfg.scenario.replicates > 0 {
        return Err(CliError::Fit("all replicates failed".into()));
    }
    Ok(())
}

fn run_recovery_study(
    cfg: &SimulateConfig,
    params: &GeneratorParams,
    mode: RecoveryMode,
    n_replicates: usize,
    n_subjects: usize,
    out: &Path,
) -> Result<(), CliError> {
    let res = recovery_study(params, mode, n_replicates, n_subjects, cfg.scenario.seed)
        .map_err(fit_err)?;
    let grid = &params.mean.grid;
    let design = params
        .func_basis
        .eval(grid)
        .map_err(|e| CliError::Fit(e.to_string()))?;
    let b = params.func_basis.n_basis();
    let eval_row = |coefs: &DMatrix<f64>, k: usize, p: usize, g: usize| -> f64 {
        (0..b).map(|j| coefs[(k, p * b + j)] * design[(g, j)]).sum()
    };
    let mut wtr = csv::Writer::from_path(out.join("recovery_curves.csv"))?;
    wtr.write_record(["component", "dim", "t", "mean_estimate", "generating", "rotated"])?;
    for k in 0..N_SCORES {
        for (p, dname) in params.dim_names.iter().enumerate() {
            for (g, &t) in grid.iter().enumerate() {
                wtr.write_record([
                    format!("{k}"),
                    dname.clone(),
                    format!("{t}"),
                    format!("{}", eval_row(&res.mean_coefs, k, p, g)),
                    format!("{}", eval_row(&res.generating_basis, k, p, g)),
                    format!("{}", eval_row(&res.rotated_basis, k, p, g)),
                ])?;
            }
        }
    }
    wtr.flush()?;
    let mut wtr = csv::Writer::from_path(out.join("recovery_l2.csv"))?;
    wtr.write_record(["component", "l2_raw", "l2_rotated"])?;
    for k in 0..N_SCORES {
        wtr.write_record([
            format!("{k}"),
            format!("{}", res.l2_raw[k]),
            format!("{}", res.l2_rotated[k]),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictConfig {
    bundle: PathBuf,
    query: PathBuf,
}

fn run_predict(cli: &Cli) -> Result<(), CliError> {
    let cfg: PredictConfig = load_config(cli)?;
    let out = ensure_out(cli)?;
    let (fit, _) = read_bundle(&cfg.bundle)?;
    let mut rdr = csv::Reader::from_path(&cfg.query)?;
    let headers = rdr.headers()?.clone();
    let expect: Vec<String> = ["subject_id", "side", "T"]
        .iter()
        .map(|s| s.to_string())
        .chain(fit.covariate_names.iter().cloned())
        .collect();
    let got: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    if got != expect {
        return Err(CliError::Data(format!(
            "query header mismatch: expected {expect:?}, got {got:?}"
        )));
    }
    let known_subjects: Vec<&str> = fit
        .fits
        .first()
        .map(|f| f.blups_u.iter().map(|(sid, _)| sid.as_str()).collect())
        .unwrap_or_default();
    let mut wtr = csv::Writer::from_path(out.join("predictions.csv"))?;
    wtr.write_record(["subject_id", "side", "T", "dim", "t", "value", "population"])?;
    for (row_idx, record) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let record = record?;
        let parse_row = || -> Result<(String, Side, f64, Vec<f64>), String> {
            let sid = record.get(0).ok_or("missing subject_id")?.to_string();
            let side = Side::parse(record.get(1).ok_or("missing side")?)
                .map_err(|e| e.to_string())?;
            let t: f64 = record
                .get(2)
                .ok_or("missing T")?
                .parse()
                .map_err(|e| format!("bad T: {e}"))?;
            let covs: Vec<f64> = (0..fit.covariate_names.len())
                .map(|a| {
                    record
                        .get(3 + a)
                        .ok_or_else(|| "missing covariate".to_string())
                        .and_then(|s| s.parse().map_err(|e| format!("bad covariate: {e}")))
                })
                .collect::<Result<_, _>>()?;
            Ok((sid, side, t, covs))
        };
        let (sid, side, big_t, covs) = parse_row()
            .map_err(|e| CliError::Data(format!("query line {line}: {e}")))?;
        let key = ObservationKey {
            subject_id: sid.clone(),
            side,
            stride_index: 0,
            long_time: big_t,
        };
        let population = !known_subjects.contains(&sid.as_str());
        let curve = predict_curve(&fit, &key, &covs).map_err(fit_err)?;
        for (p, dname) in fit.fpca.dim_names.iter().enumerate() {
            for (g, &t) in curve.grid.iter().enumerate() {
                wtr.write_record([
                    sid.clone(),
                    format!("{side}"),
                    format!("{big_t}"),
                    dname.clone(),
                    format!("{t}"),
                    format!("{}", curve.values[(p, g)]),
                    format!("{population}"),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateConfig {
    bundle: PathBuf,
    curves: PathBuf,
    covariates: PathBuf,
    #[serde(default)]
    normalize: bool,
}

fn run_evaluate(cli: &Cli) -> Result<(), CliError> {
    let cfg: EvaluateConfig = load_config(cli)?;
    let out = ensure_out(cli)?;
    let (fit, _) = read_bundle(&cfg.bundle)?;
    let ds = load_and_prepare(&cfg.curves, &cfg.covariates, cfg.normalize)?;
    let mut wtr = csv::Writer::from_path(out.join("ispe.csv"))?;
    wtr.write_record(["subject_id", "side", "stride", "T", "ispe"])?;
    let mut total = 0.0;
    for (i, key) in ds.keys.iter().enumerate() {
        let covs = ds
            .covariates
            .get(&key.subject_id, key.side)
            .ok_or_else(|| {
                CliError::Data(format!("no covariates for {} {}", key.subject_id, key.side))
            })?
            .clone();
        let pred = predict_curve(&fit, key, &covs).map_err(fit_err)?;
        let observed = mvlfm::data::MvCurve {
            values: ds.curves[i].clone(),
            grid: ds.grid.clone(),
        };
        let e = ispe(&pred, &observed).map_err(fit_err)?;
        total += e;
        wtr.write_record([
            key.subject_id.clone(),
            format!("{}", key.side),
            format!("{}", key.stride_index),
            format!("{}", key.long_time),
            format!("{e}"),
        ])?;
    }
    wtr.flush()?;
    let summary = serde_json::json!({
        "n": ds.keys.len(),
        "mean_ispe": if ds.keys.is_empty() { 0.0 } else { total / ds.keys.len() as f64 },
    });
    println!("{summary}");
    Ok(())
}

// ---------------------------------------------------------------------------
// bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BootstrapConfig {
    #[serde(flatten)]
    fit: FitConfig,
    b: usize,
    #[serde(default = "default_level")]
    level: f64,
}

fn default_level() -> f64 {
    0.95
}

fn run_bootstrap(cli: &Cli) -> Result<(), CliError> {
    let cfg: BootstrapConfig = load_config(cli)?;
    let out = ensure_out(cli)?;
    let (fit, train, _) = fit_from_config(&cfg.fit, None)?;
    let seed = cli.seed.unwrap_or(cfg.fit.seed);
    let boots = bootstrap_fixed_effects(&train, &fit, cfg.b, seed, &FitOpts::default())
        .map_err(fit_err)?;
    let mut wtr = csv::Writer::from_path(out.join("bands.csv"))?;
    wtr.write_record([
        "effect", "dim", "t", "estimate", "lower_pw", "upper_pw", "lower_sim", "upper_sim",
    ])?;
    for (a, name) in fit.covariate_names.iter().enumerate() {
        let point = fixed_effect_curve(&fit, a);
        let band = simultaneous_band(&point.estimate, &boots.estimates[a], cfg.level);
        for (p, dname) in fit.fpca.dim_names.iter().enumerate() {
            for (g, &t) in fit.grid().iter().enumerate() {
                wtr.write_record([
                    name.clone(),
                    dname.clone(),
                    format!("{t}"),
                    format!("{}", point.estimate[(p, g)]),
                    format!("{}", band.lower_pw[(p, g)]),
                    format!("{}", band.upper_pw[(p, g)]),
                    format!("{}", band.lower_sim[(p, g)]),
                    format!("{}", band.upper_sim[(p, g)]),
                ])?;
            }
        }
    }
    wtr.flush()?;
    let summary = serde_json::json!({ "b": cfg.b, "n_failed": boots.n_failed });
    println!("{summary}");
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagnoseConfig {
    bundle: PathBuf,
    curves: PathBuf,
    covariates: PathBuf,
    #[serde(default = "default_true")]
    normalize: bool,
    #[serde(default = "default_max_lag")]
    max_lag: usize,
}

fn run_diagnose(cli: &Cli) -> Result<(), CliError> {
    let cfg: DiagnoseConfig = load_config(cli)?;
    let out = ensure_out(cli)?;
    let (fit, _) = read_bundle(&cfg.bundle)?;
    let train = load_and_prepare(&cfg.curves, &cfg.covariates, cfg.normalize)?;
    write_diagnostics_csv(&out.join("diagnostics.csv"), &fit, &train, cfg.max_lag)?;
    // Score trajectories with their fitted values, for trajectory plots.
    let scores = project_scores(&train, &fit.fpca).map_err(fit_err)?;
    let mut wtr = csv::Writer::from_path(out.join("score_fits.csv"))?;
    wtr.write_record(["k", "subject_id", "side", "stride", "T", "score", "fitted"])?;
    for k in 0..fit.k() {
        let design = design_for_score(&fit, &scores, &train, k)?;
        let f = &fit.fits[k];
        let mut fitted = &design.x * &f.beta;
        let mut v_lookup = std::collections::BTreeMap::new();
        for (sid, side, v) in &f.blups_v {
            v_lookup.insert((sid.as_str(), *side), v);
        }
        for (g, (_, u)) in design.subjects.iter().zip(&f.blups_u) {
            for (local, &row) in g.rows.iter().enumerate() {
                for c in 0..design.du() {
                    fitted[row] += design.zu[(row, c)] * u[c];
                }
                let side = g.sides[g.side_of_row[local]];
                if let Some(v) = v_lookup.get(&(g.subject_id.as_str(), side)) {
                    for c in 0..design.dv() {
                        fitted[row] += design.zv[(row, c)] * v[c];
                    }
                }
            }
        }
        for (i, key) in design.keys.iter().enumerate() {
            wtr.write_record([
                format!("{k}"),
                key.subject_id.clone(),
                format!("{}", key.side),
                format!("{}", key.stride_index),
                format!("{}", key.long_time),
                format!("{}", design.response[i]),
                format!("{}", fitted[i]),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
