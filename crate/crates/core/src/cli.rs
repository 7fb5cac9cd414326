//! Command-line front end. Every subcommand writes CSV files into `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use crate::collectivity::{read_records, time_evolution, CollectivityRecord, Thresholds};
use crate::ensemble::{
    ensemble_mean_check, self_averaging_check, EnsembleConfig, EnsembleReport, SelfAveragingRow,
};
use crate::error::{Error, Result};
use crate::exec::{with_threads, Execution};
use crate::ingest::{
    log_returns, parse_price_table, ReturnMatrix, TableFormat, WindowView, DATE_FORMAT,
};
use crate::matrices::DEFAULT_SIGMA_FLOOR;
use crate::output::{fmt_f64, fmt_opt, Table};
use crate::phases::{
    annotate_events, events_table, group_means, group_means_table, phase_points,
    phase_points_table, trajectory, trajectory_table, EventTable, PeriodTable, PhaseAxes,
};
use crate::pipeline::{
    analyze, matrix_table, regress, regression_table, window_matrices, AnalysisConfig,
};
use crate::regression::{IndexSeries, MediatorKind};

#[derive(Debug, Parser)]
#[command(
    name = "collectivity",
    version,
    about = "Collectivity measures on rolling-window covariance and correlation matrices"
)]
pub struct Cli {
    /// Worker threads for window- and sample-level batches; 1 runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-window collectivity measures, labels and phase-diagram tables.
    Analyze(AnalyzeArgs),
    /// Residual correlation after regressing out a mediating series.
    Regress(RegressArgs),
    /// Monte Carlo checks of the correlated Wishart ensemble.
    Ensemble(EnsembleArgs),
    /// Rebuild phase-diagram tables from an existing collectivity.csv.
    Phases(PhasesArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Price table (CSV or TSV).
    #[arg(long)]
    pub input: PathBuf,

    #[arg(long, value_enum, default_value_t = TableFormat::Wide)]
    pub format: TableFormat,

    #[arg(long, default_value_t = 42)]
    pub window: usize,

    #[arg(long, default_value_t = 1)]
    pub stride: usize,

    /// Analyze a random subset of this many instruments.
    #[arg(long)]
    pub subsample: Option<usize>,

    /// Seed for the subsample draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Rows with a smaller standard deviation are treated as flat.
    #[arg(long, default_value_t = DEFAULT_SIGMA_FLOOR)]
    pub sigma_floor: f64,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhaseArgs {
    /// Period table `label,description,start,end`; defaults to the built-in one.
    #[arg(long)]
    pub periods: Option<PathBuf>,

    /// Event table `label,description,date`; defaults to the built-in one.
    #[arg(long)]
    pub events: Option<PathBuf>,

    /// First center date of the market trajectory.
    #[arg(long, default_value = "2007-11-01", value_parser = parse_date)]
    pub from: NaiveDate,

    /// Last center date of the market trajectory.
    #[arg(long, default_value = "2008-12-31", value_parser = parse_date)]
    pub to: NaiveDate,

    /// Also count criterion-labeled windows in the period means.
    #[arg(long)]
    pub include_labeled: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// `high=..,low=..,floor=..`; omitted keys keep their defaults.
    #[arg(long, default_value_t = Thresholds::default())]
    pub thresholds: Thresholds,

    /// Leading modes removed for cov_B2 and cov_L2; 1 leaves them empty.
    #[arg(long, default_value_t = 2)]
    pub modes: usize,

    /// Write the covariance and correlation matrices and spectra of this window.
    #[arg(long)]
    pub dump_matrix: Option<usize>,

    #[command(flatten)]
    pub phases: PhaseArgs,
}

#[derive(Debug, Args)]
pub struct RegressArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[arg(long, value_enum, default_value_t = MediatorKind::Average)]
    pub mediator: MediatorKind,

    /// Single-series price table for the index mediator.
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// TOML run description; the built-in two-block spec when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Overrides the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhasesArgs {
    /// collectivity.csv written by `analyze`.
    #[arg(long)]
    pub records: PathBuf,

    /// Relabel the records with these thresholds instead of keeping their labels.
    #[arg(long)]
    pub thresholds: Option<Thresholds>,

    #[command(flatten)]
    pub phases: PhaseArgs,

    #[arg(long)]
    pub out: PathBuf,
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, DATE_FORMAT).map_err(|e| format!("{s:?}: {e}"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn execution(threads: Option<usize>) -> Execution {
    match threads {
        Some(1) => Execution::Sequential,
        _ => Execution::Parallel,
    }
}

fn load_returns(args: &InputArgs) -> Result<ReturnMatrix> {
    let text = read_text(&args.input)?;
    let parsed = parse_price_table(&text, args.format)?;
    for msg in &parsed.rejected {
        log::warn!("{}: {msg}", args.input.display());
    }
    let returns = log_returns(&parsed.panel)?;
    match args.subsample {
        Some(n) => Ok(returns.subsample(n, args.seed)?),
        None => Ok(returns),
    }
}

fn load_index(path: &Path) -> Result<IndexSeries> {
    let parsed = parse_price_table(&read_text(path)?, TableFormat::Wide)?;
    Ok(IndexSeries::from_returns(&log_returns(&parsed.panel)?)?)
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let exec = execution(cli.threads);
    with_threads(cli.threads, || match cli.command {
        Command::Analyze(args) => cmd_analyze(&args, exec),
        Command::Regress(args) => cmd_regress(&args, exec),
        Command::Ensemble(args) => cmd_ensemble(&args, exec),
        Command::Phases(args) => cmd_phases(&args),
    })
}

pub fn cmd_analyze(args: &AnalyzeArgs, exec: Execution) -> Result<()> {
    let cfg = AnalysisConfig {
        window: args.input.window,
        stride: args.input.stride,
        thresholds: args.thresholds,
        modes: args.modes,
        sigma_floor: args.input.sigma_floor,
        execution: exec,
    };
    cfg.validate()?;
    let (periods, events) = load_tables(&args.phases)?;
    let returns = load_returns(&args.input)?;
    let records = analyze(&returns, &cfg)?;
    let out = &args.input.out;
    create_dir(out)?;
    time_evolution(&records).write_csv(&out.join("collectivity.csv"))?;
    write_phase_outputs(&records, out, &args.phases, &periods, &events)?;
    if let Some(idx) = args.dump_matrix {
        dump_window(&returns, &cfg, idx, out)?;
    }
    Ok(())
}

fn dump_window(returns: &ReturnMatrix, cfg: &AnalysisConfig, idx: usize, out: &Path) -> Result<()> {
    let count = crate::ingest::window_count(returns.len(), cfg.window, cfg.stride);
    if idx >= count {
        return Err(Error::Config(format!(
            "--dump-matrix {idx}: only {count} windows"
        )));
    }
    let view = WindowView::new(returns, idx, idx * cfg.stride, cfg.window)?;
    let wm = window_matrices(&view, cfg.sigma_floor)?;
    matrix_table(returns.tickers(), wm.covariance.source())
        .write_csv(&out.join(format!("cov_window_{idx}.csv")))?;
    matrix_table(returns.tickers(), wm.correlation.source())
        .write_csv(&out.join(format!("corr_window_{idx}.csv")))?;
    let mut spectra = Table::new(&["rank", "cov_eigenvalue", "corr_eigenvalue"]);
    let k = wm.covariance.dim();
    for i in 0..k {
        spectra.push(vec![
            (i + 1).to_string(),
            fmt_f64(wm.covariance.eigenvalues()[i]),
            fmt_f64(wm.correlation.eigenvalues()[i]),
        ]);
    }
    spectra.write_csv(&out.join(format!("eigenvalues_window_{idx}.csv")))
}

fn load_tables(args: &PhaseArgs) -> Result<(PeriodTable, EventTable)> {
    if args.from > args.to {
        return Err(crate::phases::PhaseError::InvalidRange {
            from: args.from,
            to: args.to,
        }
        .into());
    }
    let periods = match &args.periods {
        Some(p) => PeriodTable::from_delimited(&read_text(p)?)?,
        None => PeriodTable::default(),
    };
    let events = match &args.events {
        Some(p) => EventTable::from_delimited(&read_text(p)?)?,
        None => EventTable::default(),
    };
    Ok((periods, events))
}

fn write_phase_outputs(
    records: &[CollectivityRecord],
    out: &Path,
    args: &PhaseArgs,
    periods: &PeriodTable,
    events: &EventTable,
) -> Result<()> {
    let mut all_points = Vec::new();
    let mut centers = Vec::new();
    let mut steps = Vec::new();
    for axes in [
        PhaseAxes::Cov,
        PhaseAxes::Corr,
        PhaseAxes::Cov2,
        PhaseAxes::Corr2,
    ] {
        let points = phase_points(records, axes, None);
        let (means, notes) = group_means(&points, periods, args.include_labeled);
        if !points.is_empty() {
            for n in notes {
                log::info!("{axes}: {n}");
            }
        }
        centers.extend(means.into_iter().map(|m| (axes, m)));
        steps.extend(trajectory(&points, args.from, args.to)?);
        all_points.extend(points);
    }
    phase_points_table(&all_points, periods).write_csv(&out.join("phase_points.csv"))?;
    group_means_table(&centers).write_csv(&out.join("phase_centers.csv"))?;
    trajectory_table(&steps).write_csv(&out.join("trajectory.csv"))?;

    let mut window_centers: Vec<(usize, NaiveDate)> =
        records.iter().map(|r| (r.window, r.center)).collect();
    window_centers.sort_by_key(|&(w, c)| (c, w));
    let (markers, _dropped) = annotate_events(&window_centers, events);
    events_table(&markers).write_csv(&out.join("events.csv"))
}

pub fn cmd_regress(args: &RegressArgs, exec: Execution) -> Result<()> {
    let index = match (&args.index, args.mediator) {
        (Some(p), _) => Some(load_index(p)?),
        (None, MediatorKind::Index) => {
            return Err(Error::Config(
                "--mediator index requires --index FILE".into(),
            ));
        }
        (None, MediatorKind::Average) => None,
    };
    let cfg = AnalysisConfig {
        window: args.input.window,
        stride: args.input.stride,
        sigma_floor: args.input.sigma_floor,
        execution: exec,
        ..AnalysisConfig::default()
    };
    cfg.validate()?;
    let returns = load_returns(&args.input)?;
    let records = regress(&returns, &cfg, args.mediator, index.as_ref())?;
    create_dir(&args.input.out)?;
    regression_table(&records).write_csv(&args.input.out.join("regression.csv"))
}

pub fn cmd_ensemble(args: &EnsembleArgs, exec: Execution) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => EnsembleConfig::from_toml_str(&read_text(p)?)?,
        None => EnsembleConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let report = ensemble_mean_check(&cfg.spec(), cfg.t, cfg.n_samples, cfg.seed, exec)?;
    let self_avg = match (cfg.self_averaging_specs(), &cfg.self_averaging) {
        (Some(specs), Some(sa)) => Some(self_averaging_check(
            &specs, cfg.t, sa.seeds, cfg.seed, exec,
        )?),
        _ => None,
    };
    create_dir(&args.out)?;
    report_table(&report).write_csv(&args.out.join("ensemble_report.csv"))?;
    summary_table(&report).write_csv(&args.out.join("ensemble_summary.csv"))?;
    if let Some(rows) = self_avg {
        self_averaging_table(&rows).write_csv(&args.out.join("self_averaging.csv"))?;
    }
    Ok(())
}

fn report_table(r: &EnsembleReport) -> Table {
    let mut t = Table::new(&["i", "j", "population", "mean", "std_error", "z"]);
    let k = r.population.dim();
    for i in 0..k {
        for j in i..k {
            let se = r.std_error[(i, j)];
            let z = (se > 0.0).then(|| (r.mean[(i, j)] - r.population.get(i, j)) / se);
            t.push(vec![
                i.to_string(),
                j.to_string(),
                fmt_f64(r.population.get(i, j)),
                fmt_f64(r.mean[(i, j)]),
                fmt_f64(se),
                fmt_opt(z),
            ]);
        }
    }
    t
}

fn summary_table(r: &EnsembleReport) -> Table {
    let mut t = Table::new(&["metric", "value"]);
    let rows = [
        ("samples", r.sample_count.to_string()),
        ("columns", r.columns.to_string()),
        ("dim", r.population.dim().to_string()),
        ("max_abs_deviation", fmt_f64(r.max_abs_deviation)),
        ("max_z", fmt_f64(r.max_z)),
        ("scalar_mean", fmt_f64(r.scalar_mean)),
        ("scalar_std_error", fmt_f64(r.scalar_std_error)),
        ("scalar_analytic", fmt_f64(r.scalar_analytic)),
        ("scalar_z", fmt_f64(r.scalar_z())),
    ];
    for (k, v) in rows {
        t.push(vec![k.to_owned(), v]);
    }
    t
}

fn self_averaging_table(rows: &[SelfAveragingRow]) -> Table {
    let mut t = Table::new(&[
        "dim",
        "blocks",
        "samples",
        "median_abs_offblock",
        "mean_abs_offblock",
    ]);
    for r in rows {
        t.push(vec![
            r.dim.to_string(),
            r.blocks.to_string(),
            r.samples.to_string(),
            fmt_opt(r.median_abs_offblock),
            fmt_opt(r.mean_abs_offblock),
        ]);
    }
    t
}

pub fn cmd_phases(args: &PhasesArgs) -> Result<()> {
    let (periods, events) = load_tables(&args.phases)?;
    let text = read_text(&args.records)?;
    let mut records = read_records(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", args.records.display())))?;
    if let Some(th) = &args.thresholds {
        th.validate().map_err(Error::Config)?;
        for r in &mut records {
            r.apply_labels(th);
        }
    }
    create_dir(&args.out)?;
    write_phase_outputs(&records, &args.out, &args.phases, &periods, &events)
}
