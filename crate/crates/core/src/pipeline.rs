//! Window-level composition of the stages: demean, covariance and
//! correlation, eigendecomposition, mode splits, measures and labels.

use chrono::NaiveDate;

use crate::collectivity::{collectivity_measures, CollectivityRecord, Thresholds};
use crate::error::{Error, Result};
use crate::exec::{try_map_range, Execution};
use crate::ingest::{sliding_windows, ReturnMatrix, WindowView};
use crate::matrices::{
    correlation, covariance, demean_rows, mean_offdiagonal, standardize_rows, SymmetricMatrix,
    DEFAULT_SIGMA_FLOOR,
};
use crate::output::{fmt_f64, fmt_opt, Table};
use crate::regression::{
    mediator_average, mediator_index, regress_residuals, residual_collectivity, IndexSeries,
    MediatorKind,
};
use crate::spectral::{
    eigendecompose, ipr, remove_leading_modes, split_market_mode, SpectralDecomposition,
};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub window: usize,
    pub stride: usize,
    pub thresholds: Thresholds,
    /// Number of leading modes removed for the higher-order measures; 1 disables them.
    pub modes: usize,
    pub sigma_floor: f64,
    pub execution: Execution,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            window: 42,
            stride: 1,
            thresholds: Thresholds::default(),
            modes: 2,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            execution: Execution::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!(
                "window must be at least 2, got {}",
                self.window
            )));
        }
        if self.stride < 1 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.modes < 1 {
            return Err(Error::Config("modes must be at least 1".into()));
        }
        if self.sigma_floor.is_nan() || self.sigma_floor < 0.0 {
            return Err(Error::Config(format!(
                "invalid sigma floor {}",
                self.sigma_floor
            )));
        }
        self.thresholds.validate().map_err(Error::Config)
    }
}

/// Covariance and correlation of one window together with their spectra.
#[derive(Debug, Clone)]
pub struct WindowMatrices {
    pub covariance: SpectralDecomposition,
    pub correlation: SpectralDecomposition,
    pub degenerate_rows: usize,
}

pub fn window_matrices(view: &WindowView<'_>, sigma_floor: f64) -> Result<WindowMatrices> {
    let data = view.data();
    let cov = covariance(&demean_rows(data));
    let st = standardize_rows(data, sigma_floor);
    let corr = correlation(&st);
    let window_err = |source| Error::Window {
        index: view.index,
        source,
    };
    Ok(WindowMatrices {
        covariance: eigendecompose(&cov).map_err(window_err)?,
        correlation: eigendecompose(&corr).map_err(window_err)?,
        degenerate_rows: st.degenerate.len(),
    })
}

fn residual_mean(d: &SpectralDecomposition, m: usize) -> Result<(f64, bool)> {
    let split = remove_leading_modes(d, m)?;
    Ok((mean_offdiagonal(&split.residual)?, split.degenerate))
}

pub fn analyze_window(view: &WindowView<'_>, cfg: &AnalysisConfig) -> Result<CollectivityRecord> {
    let wm = window_matrices(view, cfg.sigma_floor)?;
    let window_err = |source| Error::Window {
        index: view.index,
        source,
    };
    let cov_split = split_market_mode(&wm.covariance).map_err(window_err)?;
    let corr_split = split_market_mode(&wm.correlation).map_err(window_err)?;
    let mut rec = collectivity_measures(
        &cov_split,
        &corr_split,
        wm.covariance.source(),
        wm.correlation.source(),
        view.center,
    )?;
    rec.window = view.index;
    rec.flags.degenerate_rows = wm.degenerate_rows;

    let k = view.num_instruments();
    if cfg.modes >= 2 && cfg.modes < k {
        let (b2, cov_tie) = residual_mean(&wm.covariance, cfg.modes)?;
        let (l2, corr_tie) = residual_mean(&wm.correlation, cfg.modes)?;
        rec.cov_b2 = Some(b2);
        rec.cov_l2 = Some(l2);
        rec.flags.higher_order_tie = cov_tie || corr_tie;
    }
    // an all-flat window has no meaningful market mode
    if wm.degenerate_rows < k {
        rec.ipr_market = ipr(wm.correlation.market_mode().as_slice()).ok();
    }
    rec.apply_labels(&cfg.thresholds);
    Ok(rec)
}

/// One record per window, in window order.
pub fn analyze(returns: &ReturnMatrix, cfg: &AnalysisConfig) -> Result<Vec<CollectivityRecord>> {
    cfg.validate()?;
    if returns.num_instruments() < 2 {
        return Err(crate::matrices::MatrixError::TooSmall(returns.num_instruments()).into());
    }
    let windows = sliding_windows(returns, cfg.window, cfg.stride)?;
    log::info!(
        "analyzing {} windows of {} x {}",
        windows.len(),
        returns.num_instruments(),
        cfg.window
    );
    try_map_range(windows.len(), cfg.execution, |w| {
        analyze_window(&windows[w], cfg)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionRecord {
    pub window: usize,
    pub center: NaiveDate,
    pub cov_lle: f64,
    pub corr_linr: Option<f64>,
    pub mediator: MediatorKind,
    pub degenerate_mediator: bool,
}

pub fn regress_window(
    view: &WindowView<'_>,
    cfg: &AnalysisConfig,
    mediator: MediatorKind,
    index: Option<&IndexSeries>,
) -> Result<RegressionRecord> {
    let data = view.data();
    let series = match mediator {
        MediatorKind::Average => mediator_average(data),
        MediatorKind::Index => {
            let index = index
                .ok_or_else(|| Error::Config("the index mediator needs an index file".into()))?;
            mediator_index(index, view)?
        }
    };
    let fit = regress_residuals(data, &series)?;
    let corr = correlation(&standardize_rows(data, cfg.sigma_floor));
    let d = eigendecompose(&corr).map_err(|source| Error::Window {
        index: view.index,
        source,
    })?;
    let split = split_market_mode(&d)?;
    Ok(RegressionRecord {
        window: view.index,
        center: view.center,
        cov_lle: mean_offdiagonal(&split.leading)?,
        corr_linr: residual_collectivity(&fit, cfg.sigma_floor),
        mediator,
        degenerate_mediator: fit.degenerate_mediator,
    })
}

pub fn regress(
    returns: &ReturnMatrix,
    cfg: &AnalysisConfig,
    mediator: MediatorKind,
    index: Option<&IndexSeries>,
) -> Result<Vec<RegressionRecord>> {
    cfg.validate()?;
    if mediator == MediatorKind::Index && index.is_none() {
        return Err(Error::Config(
            "the index mediator needs an index file".into(),
        ));
    }
    if returns.num_instruments() < 2 {
        return Err(crate::matrices::MatrixError::TooSmall(returns.num_instruments()).into());
    }
    let windows = sliding_windows(returns, cfg.window, cfg.stride)?;
    try_map_range(windows.len(), cfg.execution, |w| {
        regress_window(&windows[w], cfg, mediator, index)
    })
}

pub const REGRESSION_COLUMNS: [&str; 5] =
    ["center_date", "cov_LLE", "corr_LinR", "mediator", "flags"];

pub fn regression_table(records: &[RegressionRecord]) -> Table {
    let mut t = Table::new(&REGRESSION_COLUMNS);
    for r in records {
        let mediator = match r.mediator {
            MediatorKind::Average => "avg",
            MediatorKind::Index => "index",
        };
        t.push(vec![
            r.center.format(crate::ingest::DATE_FORMAT).to_string(),
            fmt_f64(r.cov_lle),
            fmt_opt(r.corr_linr),
            mediator.to_owned(),
            if r.degenerate_mediator {
                "degenerate_mediator".into()
            } else {
                String::new()
            },
        ]);
    }
    t
}

/// Square matrix as a CSV table with ticker header.
pub fn matrix_table(tickers: &[String], m: &SymmetricMatrix) -> Table {
    let mut header = vec![String::new()];
    header.extend(tickers.iter().cloned());
    let mut t = Table::new(&header);
    for (i, name) in tickers.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..m.dim()).map(|j| fmt_f64(m.get(i, j))));
        t.push(row);
    }
    t
}
