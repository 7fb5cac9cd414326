//! Price tables, log returns and sliding windows over the return matrix.
//!
//! Missing prices stay missing in the [`PricePanel`]; they are only imputed
//! when returns are formed, where any return touching a missing price is an
//! exact zero.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DMatrixView};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),

    #[error("duplicate ticker {0:?}")]
    DuplicateTicker(String),

    #[error("need at least 2 price dates, got {0}")]
    TooFewDates(usize),

    #[error("window length {t_sub} exceeds the {t_tot} available returns")]
    WindowTooLong { t_tot: usize, t_sub: usize },

    #[error("invalid window: length {t_sub}, stride {stride}")]
    InvalidWindow { t_sub: usize, stride: usize },

    #[error("subsample of {n} requested from {k} instruments")]
    InvalidSubsample { n: usize, k: usize },

    #[error("{0}")]
    Invalid(String),
}

/// Layout of a delimited price table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum TableFormat {
    /// `date,TICK1,TICK2,...`
    #[default]
    Wide,
    /// `date,ticker,close`
    Long,
}

/// Aligned daily close prices; `prices[i][t]` is instrument `i` on `dates[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    tickers: Vec<String>,
    dates: Vec<NaiveDate>,
    prices: Vec<Vec<Option<f64>>>,
}

impl PricePanel {
    pub fn new(
        tickers: Vec<String>,
        dates: Vec<NaiveDate>,
        prices: Vec<Vec<Option<f64>>>,
    ) -> Result<Self, IngestError> {
        let mut seen = HashSet::new();
        for t in &tickers {
            if !seen.insert(t.as_str()) {
                return Err(IngestError::DuplicateTicker(t.clone()));
            }
        }
        for pair in dates.windows(2) {
            if pair[1] == pair[0] {
                return Err(IngestError::DuplicateDate(pair[0]));
            }
            if pair[1] < pair[0] {
                return Err(IngestError::Invalid(format!(
                    "dates not increasing: {} after {}",
                    pair[1], pair[0]
                )));
            }
        }
        if prices.len() != tickers.len() {
            return Err(IngestError::Invalid(format!(
                "{} price rows for {} tickers",
                prices.len(),
                tickers.len()
            )));
        }
        for (ticker, row) in tickers.iter().zip(&prices) {
            if row.len() != dates.len() {
                return Err(IngestError::Invalid(format!(
                    "{ticker}: {} prices for {} dates",
                    row.len(),
                    dates.len()
                )));
            }
            if let Some(p) = row.iter().flatten().find(|p| !(p.is_finite() && **p > 0.0)) {
                return Err(IngestError::Invalid(format!(
                    "{ticker}: non-positive price {p}"
                )));
            }
        }
        Ok(Self {
            tickers,
            dates,
            prices,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &[Vec<Option<f64>>] {
        &self.prices
    }

    pub fn num_instruments(&self) -> usize {
        self.tickers.len()
    }

    pub fn missing_count(&self) -> usize {
        self.prices.iter().flatten().filter(|p| p.is_none()).count()
    }
}

/// A parsed panel plus diagnostics for rows that were rejected.
#[derive(Debug, Clone)]
pub struct ParsedPrices {
    pub panel: PricePanel,
    pub rejected: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell,
        "" | "NA" | "N/A" | "na" | "NaN" | "nan" | "null" | "NULL" | "-"
    )
}

enum Cell {
    Missing,
    Price(f64),
    NonPositive(f64),
}

fn parse_cell(cell: &str, line: u64) -> Result<Cell, IngestError> {
    if is_missing(cell) {
        return Ok(Cell::Missing);
    }
    let v = f64::from_str(cell).map_err(|_| IngestError::Parse {
        line,
        msg: format!("unparsable price {cell:?}"),
    })?;
    if !v.is_finite() {
        return Err(IngestError::Parse {
            line,
            msg: format!("non-finite price {cell:?}"),
        });
    }
    Ok(if v > 0.0 {
        Cell::Price(v)
    } else {
        Cell::NonPositive(v)
    })
}

fn parse_date(cell: &str, line: u64) -> Result<NaiveDate, IngestError> {
    NaiveDate::parse_from_str(cell, DATE_FORMAT).map_err(|_| IngestError::Parse {
        line,
        msg: format!("unparsable date {cell:?} (expected YYYY-MM-DD)"),
    })
}

/// Tab when the header line contains one, otherwise comma.
pub fn detect_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn csv_error(e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    IngestError::Parse {
        line,
        msg: e.to_string(),
    }
}

pub fn parse_price_table(text: &str, format: TableFormat) -> Result<ParsedPrices, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(str::to_owned)
        .collect();
    match format {
        TableFormat::Wide => parse_wide(&mut reader, header),
        TableFormat::Long => parse_long(&mut reader, header),
    }
}

fn parse_wide(
    reader: &mut csv::Reader<&[u8]>,
    header: Vec<String>,
) -> Result<ParsedPrices, IngestError> {
    if header.len() < 2 {
        return Err(IngestError::Parse {
            line: 1,
            msg: "wide format needs a date column and at least one ticker column".into(),
        });
    }
    let tickers: Vec<String> = header[1..].to_vec();
    if let Some(empty) = tickers.iter().position(String::is_empty) {
        return Err(IngestError::Parse {
            line: 1,
            msg: format!("empty ticker name in column {}", empty + 2),
        });
    }
    let mut rows: Vec<(NaiveDate, Vec<Option<f64>>)> = Vec::new();
    let mut rejected = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let date = parse_date(&record[0], line)?;
        let mut values = Vec::with_capacity(tickers.len());
        let mut bad = None;
        for (j, cell) in record.iter().skip(1).enumerate() {
            match parse_cell(cell, line)? {
                Cell::Missing => values.push(None),
                Cell::Price(p) => values.push(Some(p)),
                Cell::NonPositive(p) => {
                    bad.get_or_insert((j, p));
                    values.push(None);
                }
            }
        }
        if let Some((j, p)) = bad {
            let msg = format!(
                "line {line}: rejected row {date}: non-positive price {p} for {}",
                tickers[j]
            );
            log::warn!("{msg}");
            rejected.push(msg);
            continue;
        }
        rows.push((date, values));
    }
    rows.sort_by_key(|(d, _)| *d);
    let dates: Vec<NaiveDate> = rows.iter().map(|(d, _)| *d).collect();
    let mut prices = vec![Vec::with_capacity(rows.len()); tickers.len()];
    for (_, values) in rows {
        for (i, v) in values.into_iter().enumerate() {
            prices[i].push(v);
        }
    }
    Ok(ParsedPrices {
        panel: PricePanel::new(tickers, dates, prices)?,
        rejected,
    })
}

fn parse_long(
    reader: &mut csv::Reader<&[u8]>,
    header: Vec<String>,
) -> Result<ParsedPrices, IngestError> {
    if header.len() != 3 {
        return Err(IngestError::Parse {
            line: 1,
            msg: format!(
                "long format expects date,ticker,close; got {} columns",
                header.len()
            ),
        });
    }
    let mut tickers: Vec<String> = Vec::new();
    let mut ticker_index: HashMap<String, usize> = HashMap::new();
    let mut obs: BTreeMap<NaiveDate, HashMap<usize, f64>> = BTreeMap::new();
    let mut rejected = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let date = parse_date(&record[0], line)?;
        let ticker = &record[1];
        if ticker.is_empty() {
            return Err(IngestError::Parse {
                line,
                msg: "empty ticker".into(),
            });
        }
        let i = *ticker_index.entry(ticker.to_owned()).or_insert_with(|| {
            tickers.push(ticker.to_owned());
            tickers.len() - 1
        });
        let day = obs.entry(date).or_default();
        match parse_cell(&record[2], line)? {
            Cell::Missing => {}
            Cell::Price(p) => {
                if day.insert(i, p).is_some() {
                    return Err(IngestError::Parse {
                        line,
                        msg: format!("duplicate observation for {ticker} on {date}"),
                    });
                }
            }
            Cell::NonPositive(p) => {
                let msg =
                    format!("line {line}: rejected {ticker} on {date}: non-positive price {p}");
                log::warn!("{msg}");
                rejected.push(msg);
            }
        }
    }
    let dates: Vec<NaiveDate> = obs.keys().copied().collect();
    let prices = (0..tickers.len())
        .map(|i| obs.values().map(|day| day.get(&i).copied()).collect())
        .collect();
    Ok(ParsedPrices {
        panel: PricePanel::new(tickers, dates, prices)?,
        rejected,
    })
}

/// K×T_tot log returns. Column `t` is dated by the later of the two prices.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnMatrix {
    tickers: Vec<String>,
    dates: Vec<NaiveDate>,
    values: DMatrix<f64>,
}

impl ReturnMatrix {
    pub fn new(
        tickers: Vec<String>,
        dates: Vec<NaiveDate>,
        values: DMatrix<f64>,
    ) -> Result<Self, IngestError> {
        if values.nrows() != tickers.len() || values.ncols() != dates.len() {
            return Err(IngestError::Invalid(format!(
                "return matrix is {}x{} but there are {} tickers and {} dates",
                values.nrows(),
                values.ncols(),
                tickers.len(),
                dates.len()
            )));
        }
        Ok(Self {
            tickers,
            dates,
            values,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn num_instruments(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> ReturnMatrix {
        ReturnMatrix {
            tickers: rows.iter().map(|&i| self.tickers[i].clone()).collect(),
            dates: self.dates.clone(),
            values: self.values.select_rows(rows),
        }
    }

    /// Uniform selection of `n` instruments without replacement; the chosen
    /// rows keep their original relative order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<ReturnMatrix, IngestError> {
        let k = self.num_instruments();
        if n == 0 || n > k {
            return Err(IngestError::InvalidSubsample { n, k });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = index::sample(&mut rng, k, n).into_vec();
        rows.sort_unstable();
        Ok(self.select_rows(&rows))
    }
}

pub fn log_returns(panel: &PricePanel) -> Result<ReturnMatrix, IngestError> {
    let n_dates = panel.dates.len();
    if n_dates < 2 {
        return Err(IngestError::TooFewDates(n_dates));
    }
    let k = panel.num_instruments();
    let t_tot = n_dates - 1;
    let values = DMatrix::from_fn(k, t_tot, |i, t| {
        match (panel.prices[i][t], panel.prices[i][t + 1]) {
            (Some(a), Some(b)) => (b / a).ln(),
            _ => 0.0,
        }
    });
    ReturnMatrix::new(panel.tickers.clone(), panel.dates[1..].to_vec(), values)
}

/// Offset (0-based) of the center date inside a window of `t_sub` days.
/// For even lengths this is the later of the two middle days.
pub const fn center_offset(t_sub: usize) -> usize {
    t_sub / 2
}

/// Read-only view of `len` consecutive return columns.
#[derive(Debug, Clone, Copy)]
pub struct WindowView<'a> {
    returns: &'a ReturnMatrix,
    /// Ordinal of this window in the sliding sequence.
    pub index: usize,
    /// 0-based first column.
    pub start: usize,
    pub len: usize,
    pub center: NaiveDate,
}

impl<'a> WindowView<'a> {
    pub fn new(
        returns: &'a ReturnMatrix,
        index: usize,
        start: usize,
        len: usize,
    ) -> Result<Self, IngestError> {
        if len == 0 || start + len > returns.len() {
            return Err(IngestError::WindowTooLong {
                t_tot: returns.len().saturating_sub(start),
                t_sub: len,
            });
        }
        Ok(Self {
            returns,
            index,
            start,
            len,
            center: returns.dates[start + center_offset(len)],
        })
    }

    pub fn data(&self) -> DMatrixView<'a, f64> {
        self.returns.values.columns(self.start, self.len)
    }

    pub fn dates(&self) -> &'a [NaiveDate] {
        &self.returns.dates[self.start..self.start + self.len]
    }

    pub fn returns(&self) -> &'a ReturnMatrix {
        self.returns
    }

    pub fn num_instruments(&self) -> usize {
        self.returns.num_instruments()
    }
}

pub fn window_count(t_tot: usize, t_sub: usize, stride: usize) -> usize {
    if t_sub == 0 || stride == 0 || t_tot < t_sub {
        0
    } else {
        (t_tot - t_sub) / stride + 1
    }
}

pub fn sliding_windows(
    returns: &ReturnMatrix,
    t_sub: usize,
    stride: usize,
) -> Result<Vec<WindowView<'_>>, IngestError> {
    if t_sub == 0 || stride == 0 {
        return Err(IngestError::InvalidWindow { t_sub, stride });
    }
    let t_tot = returns.len();
    if t_tot < t_sub {
        return Err(IngestError::WindowTooLong { t_tot, t_sub });
    }
    (0..window_count(t_tot, t_sub, stride))
        .map(|w| WindowView::new(returns, w, w * stride, t_sub))
        .collect()
}
