//! Subcommands of the `fdapanel` binary. Every command reads and writes
//! files in one working directory and leaves a `manifest_<command>.json`
//! next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cluster::{kmeans_functional, label_alert_levels, transition_report, ClusterModel, KMeansConfig};
use crate::curve::{fit_dataset, functional_mean, functional_sd, pointwise_mean, FunctionalDataset, SmoothConfig, Smoothing};
use crate::error::{Error, Result};
use crate::fosr::{
    crossing_count, default_lambda_grid, evaluate_fits, fit_flm, fit_fosqr, select_lambda, CvOptions, DesignMatrix,
    MeanFitModel, QuantileFitModel, RegressionOptions,
};
use crate::ingest::{align_epidemic_time, load_covariates, load_panel, AlignConfig, COVARIATE_COLUMNS};
use crate::io::{
    fmt_f64, read_clusters, read_raw_curves, read_smoothed, read_table, write_centroids, write_clusters,
    write_coefficient_curves, write_raw_curves, write_series, write_smoothed, write_table, Metadata, ModelFile,
};
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "fdapanel", version, about = "Functional data pipeline for panels of cumulative-count curves")]
pub struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "FDAPANEL_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align a raw panel to epidemic time and normalize per 100k.
    Ingest(IngestArgs),
    /// Smooth aligned curves onto a B-spline basis.
    Smooth(SmoothArgs),
    /// Cluster curves and derivatives into alert levels.
    Cluster(ClusterArgs),
    /// Fit quantile and mean function-on-scalar regressions.
    Regress(RegressArgs),
    /// Compare fits and emit plot data.
    Report(ReportArgs),
    /// Run every stage in order.
    Run(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ThresholdArgs {
    /// Cumulative cases that mark day 0.
    #[arg(long, default_value_t = 240)]
    pub case_threshold: u64,
    /// Cumulative deaths a city must reach to be included.
    #[arg(long, default_value_t = 5)]
    pub death_threshold: u64,
    /// Minimum reported days after day 0.
    #[arg(long, default_value_t = 240)]
    pub min_days: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SmoothParams {
    /// Number of basis functions.
    #[arg(long = "num-basis", short = 'K', default_value_t = 20)]
    pub num_basis: usize,
    /// Spline order (4 is cubic).
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Evaluation grid size.
    #[arg(long = "grid-points", short = 'G', default_value_t = 300)]
    pub grid_points: usize,
    /// Roughness penalty, or `gcv` to choose it per curve.
    #[arg(long = "lambda-s", default_value = "0")]
    pub lambda_s: String,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterParams {
    /// Number of clusters.
    #[arg(long = "clusters", default_value_t = 3)]
    pub k: usize,
    /// Derivative orders to cluster.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub ell: Vec<usize>,
    /// Seed for k-means++ initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Iteration cap for the Lloyd updates.
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Args)]
pub struct RegressParams {
    /// Quantile levels to fit.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,0.95")]
    pub tau: Vec<f64>,
    /// Fixed penalty shared by all grid points; cross-validated when absent.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Candidate penalties for cross-validation; scaled to the data when absent.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Vec<f64>,
    /// Cross-validation folds over cities.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Seed for the fold assignment.
    #[arg(long, default_value_t = 0)]
    pub cv_seed: u64,
    /// Grid points scored during cross-validation.
    #[arg(long, default_value_t = 10)]
    pub cv_points: usize,
    /// Largest tolerated fraction of grid points without a fit.
    #[arg(long, default_value_t = 0.10)]
    pub max_skip: f64,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Panel CSV: city_id,date,cum_cases,cum_deaths,population.
    #[arg(long)]
    pub panel: PathBuf,
    /// Covariate CSV, restricted to the included cities.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub dir: PathBuf,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SmoothArgs {
    /// Working directory holding stage inputs and outputs.
    #[arg(long)]
    pub dir: PathBuf,
    /// Aligned curves; defaults to `<dir>/curves.csv`.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[command(flatten)]
    pub params: SmoothParams,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    /// Working directory holding stage inputs and outputs.
    #[arg(long)]
    pub dir: PathBuf,
    /// Smoothed curves; defaults to `<dir>/smoothed.csv`.
    #[arg(long)]
    pub smoothed: Option<PathBuf>,
    #[command(flatten)]
    pub params: ClusterParams,
}

#[derive(Debug, Clone, Args)]
pub struct RegressArgs {
    /// Working directory holding stage inputs and outputs.
    #[arg(long)]
    pub dir: PathBuf,
    /// Smoothed curves; defaults to `<dir>/smoothed.csv`.
    #[arg(long)]
    pub smoothed: Option<PathBuf>,
    /// Covariates; defaults to `<dir>/covariates.csv`.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[command(flatten)]
    pub params: RegressParams,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Working directory holding stage inputs and outputs.
    #[arg(long)]
    pub dir: PathBuf,
    /// Smoothed curves; defaults to `<dir>/smoothed.csv`.
    #[arg(long)]
    pub smoothed: Option<PathBuf>,
    /// Covariates; defaults to `<dir>/covariates.csv`.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Clustering whose alert levels group the metrics.
    #[arg(long, default_value_t = 0)]
    pub cluster_ell: usize,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Panel CSV: city_id,date,cum_cases,cum_deaths,population.
    #[arg(long)]
    pub panel: PathBuf,
    /// Covariate CSV with one row per city.
    #[arg(long)]
    pub covariates: PathBuf,
    /// Working directory holding stage inputs and outputs.
    #[arg(long)]
    pub dir: PathBuf,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[command(flatten)]
    pub smooth: SmoothParams,
    #[command(flatten)]
    pub cluster: ClusterParams,
    #[command(flatten)]
    pub regress: RegressParams,
}

/// Process exit status for an error: 1 usage, 2 data, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidQuantile(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

/// Runs a parsed command line and returns a one-line summary per stage.
pub fn run(cli: Cli) -> Result<Vec<String>> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be positive".into()));
        }
        // the pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Ingest(a) => Ok(vec![cmd_ingest(&a)?]),
        Command::Smooth(a) => Ok(vec![cmd_smooth(&a)?]),
        Command::Cluster(a) => Ok(vec![cmd_cluster(&a)?]),
        Command::Regress(a) => Ok(vec![cmd_regress(&a)?]),
        Command::Report(a) => Ok(vec![cmd_report(&a)?]),
        Command::Run(a) => cmd_run(&a),
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn or_default(path: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| dir.join(name))
}

fn tau_tag(tau: f64) -> String {
    format!("tau{tau}")
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<String> {
    let cfg = AlignConfig {
        case_threshold: a.thresholds.case_threshold,
        death_threshold: a.thresholds.death_threshold,
        min_days: a.thresholds.min_days,
    };
    let mut man = RunManifest::new("ingest");
    man.param("thresholds", cfg);
    man.input(&a.panel)?;
    if let Some(c) = &a.covariates {
        man.input(c)?;
    }
    let panel = load_panel(&a.panel)?;
    let aligned = align_epidemic_time(&panel.records, &cfg)?;
    if aligned.curves.is_empty() {
        return Err(Error::Empty("no cities passed thresholds".into()));
    }
    let ids: Vec<String> = aligned.curves.iter().map(|c| c.id.clone()).collect();
    let covariates = a.covariates.as_ref().map(|c| load_covariates(c, &ids)).transpose()?;

    prepare_dir(&a.dir)?;
    let mut meta = Metadata::new("raw-curves", &man.digest);
    meta.set("units", "deaths per 100k").set("duplicates", panel.duplicates);
    write_raw_curves(a.dir.join("curves.csv"), &meta, &aligned.curves)?;

    let rows = aligned
        .curves
        .iter()
        .zip(&aligned.day_zero)
        .map(|(c, d)| vec![c.id.clone(), d.to_string(), fmt_f64(c.last_time())]);
    write_table(
        a.dir.join("cities.csv"),
        &Metadata::new("cities", &man.digest),
        &["city_id".into(), "day_zero".into(), "last_day".into()],
        rows,
    )?;
    let rows = aligned
        .exclusions
        .iter()
        .map(|e| vec![e.city_id.clone(), e.reason.code().to_string()]);
    write_table(
        a.dir.join("exclusions.csv"),
        &Metadata::new("exclusions", &man.digest),
        &["city_id".into(), "reason".into()],
        rows,
    )?;
    if let Some(table) = &covariates {
        let mut header = vec!["city_id".to_string()];
        header.extend(COVARIATE_COLUMNS.iter().map(|s| s.to_string()));
        let rows = table.ids().iter().zip(table.raw()).map(|(id, r)| {
            let mut row = vec![id.clone()];
            row.extend(r.iter().map(|v| fmt_f64(*v)));
            row
        });
        write_table(a.dir.join("covariates.csv"), &Metadata::new("covariates", &man.digest), &header, rows)?;
    }
    man.write(&a.dir)?;
    Ok(format!(
        "ingest: {} curves, {} excluded, {} duplicate rows",
        aligned.curves.len(),
        aligned.exclusions.len(),
        panel.duplicates
    ))
}

fn parse_smoothing(s: &str) -> Result<Smoothing> {
    if s.eq_ignore_ascii_case("gcv") {
        return Ok(Smoothing::Gcv);
    }
    match s.parse::<f64>() {
        Ok(l) if l >= 0.0 && l.is_finite() => Ok(Smoothing::Fixed(l)),
        _ => Err(Error::InvalidConfig(format!("--lambda-s must be a nonnegative number or `gcv`, got `{s}`"))),
    }
}

pub fn cmd_smooth(a: &SmoothArgs) -> Result<String> {
    let smoothing = parse_smoothing(&a.params.lambda_s)?;
    let config = SmoothConfig {
        num_basis: a.params.num_basis,
        order: a.params.order,
        grid_points: a.params.grid_points,
        smoothing,
    };
    let curves_path = or_default(&a.curves, &a.dir, "curves.csv");
    let mut man = RunManifest::new("smooth");
    man.param("config", config);
    man.input(&curves_path)?;
    let (_, raws) = read_raw_curves(&curves_path)?;
    let fit = fit_dataset(&raws, &config)?;
    let ds = &fit.dataset;

    prepare_dir(&a.dir)?;
    write_smoothed(a.dir.join("smoothed.csv"), &Metadata::new("smoothed-curves", &man.digest), ds)?;

    let mut rows: Vec<Vec<String>> = fit
        .reports
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                r.n_points.to_string(),
                fmt_f64(r.rss),
                fmt_f64(r.rmse),
                fmt_f64(r.lambda),
                "ok".into(),
            ]
        })
        .collect();
    for (id, e) in &fit.failures {
        log::warn!("curve {id} not fitted: {e}");
        let nan = fmt_f64(f64::NAN);
        rows.push(vec![id.clone(), "0".into(), nan.clone(), nan.clone(), nan, e.to_string()]);
    }
    rows.sort();
    let header: Vec<String> = ["city_id", "n_points", "rss", "rmse", "lambda", "status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_table(a.dir.join("smooth_report.csv"), &Metadata::new("smooth-report", &man.digest), &header, rows)?;

    let mean = functional_mean(ds)?.masked_values(0, &ds.grid)?;
    let pmean = pointwise_mean(&ds.grid_values(0)?);
    let sd = if ds.len() >= 2 { functional_sd(ds)? } else { vec![f64::NAN; ds.grid.len()] };
    write_series(
        a.dir.join("mean_sd.csv"),
        &Metadata::new("mean-sd", &man.digest),
        &ds.grid,
        &[("mean".into(), mean), ("pointwise_mean".into(), pmean), ("sd".into(), sd)],
    )?;
    man.write(&a.dir)?;
    let worst = fit.reports.iter().map(|r| r.rmse).fold(0.0, f64::max);
    Ok(format!(
        "smooth: {} curves fitted, {} failed, max rmse {worst:.4}",
        fit.reports.len(),
        fit.failures.len()
    ))
}

pub fn cmd_cluster(a: &ClusterArgs) -> Result<String> {
    let path = or_default(&a.smoothed, &a.dir, "smoothed.csv");
    let mut man = RunManifest::new("cluster");
    man.param("k", a.params.k)
        .param("ell", &a.params.ell)
        .param("seed", a.params.seed)
        .param("max_iter", a.params.max_iter);
    man.input(&path)?;
    let (_, ds) = read_smoothed(&path)?;
    prepare_dir(&a.dir)?;

    let mut models: Vec<ClusterModel> = Vec::new();
    for &ell in &a.params.ell {
        let cfg = KMeansConfig {
            max_iter: a.params.max_iter,
            ..KMeansConfig::new(a.params.k, ell, a.params.seed)
        };
        let model = label_alert_levels(kmeans_functional(&ds, &cfg)?);
        write_clusters(a.dir.join(format!("clusters_ell{ell}.csv")), &Metadata::new("clusters", &man.digest), &model)?;
        write_centroids(
            a.dir.join(format!("centroids_ell{ell}.csv")),
            &Metadata::new("centroids", &man.digest),
            &model,
        )?;
        models.push(model);
    }
    let find = |ell: usize| models.iter().find(|m| m.ell == ell);
    let mut summary = format!("cluster: {} curves at ell {:?}", ds.len(), a.params.ell);
    if let (Some(l), Some(v), Some(acc)) = (find(0), find(1), find(2)) {
        let report = transition_report(l, v, acc)?;
        let rows = report.rows.iter().map(|r| {
            vec![
                r.city_id.clone(),
                r.level.clone(),
                r.velocity.clone(),
                r.acceleration.clone(),
                r.code.clone(),
            ]
        });
        let header: Vec<String> = ["city_id", "level", "velocity", "acceleration", "code"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        write_table(a.dir.join("transitions.csv"), &Metadata::new("transitions", &man.digest), &header, rows)?;
        let rows = report.summary.iter().map(|(c, n)| vec![c.clone(), n.to_string()]);
        write_table(
            a.dir.join("transition_summary.csv"),
            &Metadata::new("transition-summary", &man.digest),
            &["code".into(), "count".into()],
            rows,
        )?;
        summary.push_str(&format!(", {} transition codes", report.summary.len()));
    }
    man.write(&a.dir)?;
    Ok(summary)
}

/// Checks the schema header of a file this tool wrote; untagged user files pass.
fn validate_if_tagged(path: &Path, kind: &str) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.starts_with('#') {
        read_table(path, kind)?;
    }
    Ok(())
}

fn load_design(ds: &FunctionalDataset, path: &Path) -> Result<DesignMatrix> {
    validate_if_tagged(path, "covariates")?;
    let ids: Vec<String> = ds.curves.iter().map(|c| c.id.clone()).collect();
    Ok(load_covariates(path, &ids)?.into_design())
}

pub fn cmd_regress(a: &RegressArgs) -> Result<String> {
    let p = &a.params;
    if p.tau.is_empty() {
        return Err(Error::InvalidConfig("no quantile levels given".into()));
    }
    let smoothed = or_default(&a.smoothed, &a.dir, "smoothed.csv");
    let cov_path = or_default(&a.covariates, &a.dir, "covariates.csv");
    let mut man = RunManifest::new("regress");
    man.param("tau", &p.tau).param("lambda", p.lambda).param("max_skip", p.max_skip);
    if p.lambda.is_none() {
        man.param("lambda_grid", &p.lambda_grid)
            .param("folds", p.folds)
            .param("cv_seed", p.cv_seed)
            .param("cv_points", p.cv_points);
    }
    man.input(&smoothed)?.input(&cov_path)?;
    let (_, ds) = read_smoothed(&smoothed)?;
    let x = load_design(&ds, &cov_path)?;
    let opts = RegressionOptions {
        max_skip_fraction: p.max_skip,
    };
    let cv = CvOptions {
        folds: p.folds,
        seed: p.cv_seed,
        eval_points: p.cv_points,
    };
    prepare_dir(&a.dir)?;

    let mut models: Vec<QuantileFitModel> = Vec::new();
    for &tau in &p.tau {
        let lambda = match p.lambda {
            Some(l) => l,
            None => {
                let grid = if p.lambda_grid.is_empty() {
                    default_lambda_grid(&ds, &x, tau, 8, p.cv_points)?
                } else {
                    p.lambda_grid.clone()
                };
                let sel = select_lambda(&ds, &x, tau, &grid, &cv)?;
                let rows = sel.scores.iter().map(|(l, s)| vec![fmt_f64(*l), fmt_f64(*s)]);
                let mut meta = Metadata::new("cv-scores", &man.digest);
                meta.set("tau", tau).set("selected", fmt_f64(sel.lambda));
                write_table(
                    a.dir.join(format!("cv_{}.csv", tau_tag(tau))),
                    &meta,
                    &["lambda".into(), "score".into()],
                    rows,
                )?;
                sel.lambda
            }
        };
        let model = fit_fosqr(&ds, &x, tau, lambda, &opts)?;
        ModelFile::from_quantile(&model, &man.digest).write(a.dir.join(format!("model_{}.json", tau_tag(tau))))?;
        let mut meta = Metadata::new("coefficients", &man.digest);
        meta.set("model", "fosqr").set("tau", tau).set("lambda", fmt_f64(lambda));
        write_coefficient_curves(
            a.dir.join(format!("coef_{}.csv", tau_tag(tau))),
            &meta,
            &model.coefficients,
            &ds.grid,
        )?;
        models.push(model);
    }
    let flm = fit_flm(&ds, &x, &opts)?;
    ModelFile::from_mean(&flm, &man.digest).write(a.dir.join("model_flm.json"))?;
    let mut meta = Metadata::new("coefficients", &man.digest);
    meta.set("model", "flm");
    write_coefficient_curves(a.dir.join("coef_flm.csv"), &meta, &flm.coefficients, &ds.grid)?;

    let crossings = crossing_count(&ds, &x, &models)?;
    let mut meta = Metadata::new("regress-summary", &man.digest);
    meta.set("quantile_crossings", crossings);
    let mut rows: Vec<Vec<String>> = models
        .iter()
        .map(|m| {
            let worst = m.pointwise.iter().map(|f| f.certificate.worst()).fold(0.0, f64::max);
            vec![
                "fosqr".into(),
                fmt_f64(m.tau),
                fmt_f64(m.lambda),
                m.active_covariates().len().to_string(),
                m.skipped.len().to_string(),
                fmt_f64(worst),
            ]
        })
        .collect();
    rows.push(vec![
        "flm".into(),
        "NaN".into(),
        "0".into(),
        x.ncols().to_string(),
        flm.skipped.len().to_string(),
        "0".into(),
    ]);
    let header: Vec<String> = ["model", "tau", "lambda", "active", "skipped", "max_certificate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_table(a.dir.join("regress_summary.csv"), &meta, &header, rows)?;
    man.write(&a.dir)?;
    Ok(format!(
        "regress: {} quantile models + FLM on {} curves, {crossings} crossings",
        models.len(),
        ds.len()
    ))
}

fn load_models(dir: &Path) -> Result<(Vec<PathBuf>, Vec<QuantileFitModel>, MeanFitModel)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("model_tau") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    let mut models = paths
        .iter()
        .map(|p| ModelFile::read(p)?.into_quantile())
        .collect::<Result<Vec<_>>>()?;
    if models.is_empty() {
        return Err(Error::Empty(format!("no quantile models in {}", dir.display())));
    }
    models.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let flm_path = dir.join("model_flm.json");
    let flm = ModelFile::read(&flm_path)?.into_mean()?;
    paths.push(flm_path);
    Ok((paths, models, flm))
}

pub fn cmd_report(a: &ReportArgs) -> Result<String> {
    let smoothed = or_default(&a.smoothed, &a.dir, "smoothed.csv");
    let cov_path = or_default(&a.covariates, &a.dir, "covariates.csv");
    let (model_paths, models, flm) = load_models(&a.dir)?;
    let cl_path = a.dir.join(format!("clusters_ell{}.csv", a.cluster_ell));
    let ce_path = a.dir.join(format!("centroids_ell{}.csv", a.cluster_ell));

    let mut man = RunManifest::new("report");
    man.param("cluster_ell", a.cluster_ell);
    man.input(&smoothed)?.input(&cov_path)?;
    for p in &model_paths {
        man.input(p)?;
    }
    let clusters = if cl_path.exists() && ce_path.exists() {
        man.input(&cl_path)?.input(&ce_path)?;
        Some(read_clusters(&cl_path, &ce_path)?)
    } else {
        log::warn!("no clustering at ell {}; metrics are not grouped by alert level", a.cluster_ell);
        None
    };
    let (_, ds) = read_smoothed(&smoothed)?;
    let x = load_design(&ds, &cov_path)?;
    let metrics = evaluate_fits(&ds, &x, &models, &flm, clusters.as_ref())?;
    let crossings = crossing_count(&ds, &x, &models)?;

    let rows = metrics.iter().map(|m| {
        vec![
            m.model.clone(),
            fmt_f64(m.tau),
            m.group.clone(),
            fmt_f64(m.mean_pinball),
            m.n_evaluations.to_string(),
        ]
    });
    let mut meta = Metadata::new("metrics", &man.digest);
    meta.set("quantile_crossings", crossings);
    let header: Vec<String> = ["model", "tau", "group", "mean_pinball", "n_evaluations"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_table(a.dir.join("metrics.csv"), &meta, &header, rows)?;

    // side-by-side comparison per group and level
    let mut comparison = Vec::new();
    for q in metrics.iter().filter(|m| m.model == "fosqr") {
        if let Some(f) = metrics
            .iter()
            .find(|m| m.model == "flm" && m.tau == q.tau && m.group == q.group)
        {
            comparison.push(vec![
                q.group.clone(),
                fmt_f64(q.tau),
                fmt_f64(q.mean_pinball),
                fmt_f64(f.mean_pinball),
                fmt_f64(q.mean_pinball / f.mean_pinball),
                q.n_evaluations.to_string(),
            ]);
        }
    }
    let header: Vec<String> = ["group", "tau", "fosqr_pinball", "flm_pinball", "ratio", "n_evaluations"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_table(
        a.dir.join("level_comparison.csv"),
        &Metadata::new("level-comparison", &man.digest),
        &header,
        comparison,
    )?;

    // quantile curves at the covariate means against cluster mean curves
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    for m in &models {
        series.push((format!("q_{}", m.tau), m.coefficients.curves[0].masked_values(0, &ds.grid)?));
    }
    series.push(("flm".into(), flm.coefficients.curves[0].masked_values(0, &ds.grid)?));
    if let Some(cm) = &clusters {
        let values = ds.grid_values(0)?;
        let mut ranked: Vec<usize> = (0..cm.k).collect();
        ranked.sort_by_key(|&c| cm.alert_rank(c));
        for c in ranked {
            let members: Vec<Vec<f64>> = ds
                .curves
                .iter()
                .zip(&values)
                .filter(|(curve, _)| cm.cluster_of(&curve.id) == Some(c))
                .map(|(_, v)| v.clone())
                .collect();
            series.push((format!("cluster_{}", cm.alert_label(c)), pointwise_mean(&members)));
        }
    }
    write_series(
        a.dir.join("quantile_vs_clusters.csv"),
        &Metadata::new("plot-quantile-vs-clusters", &man.digest),
        &ds.grid,
        &series,
    )?;
    man.write(&a.dir)?;
    Ok(format!("report: {} metric rows, {crossings} crossings", metrics.len()))
}

pub fn cmd_run(a: &RunArgs) -> Result<Vec<String>> {
    let mut out = vec![cmd_ingest(&IngestArgs {
        panel: a.panel.clone(),
        covariates: Some(a.covariates.clone()),
        dir: a.dir.clone(),
        thresholds: a.thresholds.clone(),
    })?];
    out.push(cmd_smooth(&SmoothArgs {
        dir: a.dir.clone(),
        curves: None,
        params: a.smooth.clone(),
    })?);
    out.push(cmd_cluster(&ClusterArgs {
        dir: a.dir.clone(),
        smoothed: None,
        params: a.cluster.clone(),
    })?);
    out.push(cmd_regress(&RegressArgs {
        dir: a.dir.clone(),
        smoothed: None,
        covariates: None,
        params: a.regress.clone(),
    })?);
    let ell = if a.cluster.ell.contains(&0) { 0 } else { a.cluster.ell.first().copied().unwrap_or(0) };
    out.push(cmd_report(&ReportArgs {
        dir: a.dir.clone(),
        smoothed: None,
        covariates: None,
        cluster_ell: ell,
    })?);
    Ok(out)
}
