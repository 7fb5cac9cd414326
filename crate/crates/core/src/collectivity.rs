//! Absolute and relative collectivity measures of one window and the
//! three-criterion classification.
//!
//! The absolute measures are off-diagonal means of the full matrix, its
//! market-mode dyadic and the residual:
//!
//! ```text
//! ⟨cov⟩°  = ⟨cov⟩°_BLE + ⟨cov⟩°_B      (covariance side)
//! ⟨corr⟩° = ⟨cov⟩°_LLE + ⟨cov⟩°_L      (correlation side)
//! ```
//!
//! The relative measures divide the market-mode share by the full mean.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::ingest::DATE_FORMAT;
use crate::matrices::{mean_offdiagonal, mean_with_diagonal, MatrixError, SymmetricMatrix};
use crate::output::{fmt_f64, fmt_opt, Table};
use crate::spectral::ModeSplit;

/// Denominators with smaller magnitude leave the relative measure undefined.
pub const UNDEFINED_DENOMINATOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Relative market share above which a window is highly collective.
    pub high_rel: f64,
    /// Relative market share below which a window has low collectivity.
    pub low_rel: f64,
    /// Minimum market-mode covariance mean for the high-value label.
    pub abs_ble_floor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            high_rel: 0.997,
            low_rel: 0.8,
            abs_ble_floor: 4.1e-4,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.low_rel && self.low_rel < self.high_rel && self.high_rel < 1.0) {
            return Err(format!(
                "thresholds need 0 < low < high < 1, got low={} high={}",
                self.low_rel, self.high_rel
            ));
        }
        if self.abs_ble_floor.is_nan() || self.abs_ble_floor <= 0.0 {
            return Err(format!(
                "floor must be positive, got {}",
                self.abs_ble_floor
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Thresholds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "high={},low={},floor={}",
            self.high_rel, self.low_rel, self.abs_ble_floor
        )
    }
}

/// Parses `high=0.997,low=0.8,floor=4.1e-4`; omitted keys keep their defaults.
impl FromStr for Thresholds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut th = Thresholds::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| format!("bad number {value:?} for {key}"))?;
            match key.trim() {
                "high" => th.high_rel = v,
                "low" => th.low_rel = v,
                "floor" => th.abs_ble_floor = v,
                other => return Err(format!("unknown threshold {other:?}")),
            }
        }
        th.validate()?;
        Ok(th)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub enum CriterionLabel {
    /// Blue: nearly all collectivity sits in the market mode.
    HighCol,
    /// Red: low relative market collectivity.
    LCol,
    /// Green: intermediate relative share with a large market-mode mean.
    /// Covariance side only.
    HighVal,
    /// Black: none of the criteria hold.
    #[default]
    NoneLabel,
}

impl CriterionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CriterionLabel::HighCol => "HighCol",
            CriterionLabel::LCol => "LCol",
            CriterionLabel::HighVal => "HighVal",
            CriterionLabel::NoneLabel => "None",
        }
    }

    pub fn is_criterion(self) -> bool {
        self != CriterionLabel::NoneLabel
    }
}

impl fmt::Display for CriterionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CriterionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "HighCol" => Ok(CriterionLabel::HighCol),
            "LCol" => Ok(CriterionLabel::LCol),
            "HighVal" => Ok(CriterionLabel::HighVal),
            "None" | "" => Ok(CriterionLabel::NoneLabel),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub cov_tie: bool,
    pub corr_tie: bool,
    pub higher_order_tie: bool,
    pub cov_undefined: bool,
    pub corr_undefined: bool,
    pub cov_negative_denominator: bool,
    pub corr_negative_denominator: bool,
    /// Zero-variance rows in the window.
    pub degenerate_rows: usize,
}

impl Flags {
    pub fn is_empty(&self) -> bool {
        *self == Flags::default()
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = [
            (self.cov_tie, "cov_tie"),
            (self.corr_tie, "corr_tie"),
            (self.higher_order_tie, "higher_order_tie"),
            (self.cov_undefined, "cov_undefined"),
            (self.corr_undefined, "corr_undefined"),
            (self.cov_negative_denominator, "cov_negative_denominator"),
            (self.corr_negative_denominator, "corr_negative_denominator"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| (*name).to_owned())
        .collect();
        if self.degenerate_rows > 0 {
            parts.push(format!("degenerate_rows={}", self.degenerate_rows));
        }
        f.write_str(&parts.join(";"))
    }
}

impl FromStr for Flags {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut flags = Flags::default();
        for token in s.split(';').filter(|t| !t.is_empty()) {
            match token {
                "cov_tie" => flags.cov_tie = true,
                "corr_tie" => flags.corr_tie = true,
                "higher_order_tie" => flags.higher_order_tie = true,
                "cov_undefined" => flags.cov_undefined = true,
                "corr_undefined" => flags.corr_undefined = true,
                "cov_negative_denominator" => flags.cov_negative_denominator = true,
                "corr_negative_denominator" => flags.corr_negative_denominator = true,
                other => {
                    let n = other
                        .strip_prefix("degenerate_rows=")
                        .and_then(|n| n.parse().ok())
                        .ok_or_else(|| format!("unknown flag {other:?}"))?;
                    flags.degenerate_rows = n;
                }
            }
        }
        Ok(flags)
    }
}

/// Per-window measures for both approaches.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectivityRecord {
    pub window: usize,
    pub center: NaiveDate,
    pub cov_mean_offdiag: f64,
    pub cov_ble: f64,
    pub cov_b: f64,
    pub rel_cov_ble: Option<f64>,
    pub corr_mean_offdiag: f64,
    pub cov_lle: f64,
    pub cov_l: f64,
    pub rel_corr_lle: Option<f64>,
    pub cov_mean_withdiag: f64,
    pub corr_mean_withdiag: f64,
    pub cov_b2: Option<f64>,
    pub cov_l2: Option<f64>,
    pub ipr_market: Option<f64>,
    pub cov_label: CriterionLabel,
    pub corr_label: CriterionLabel,
    pub flags: Flags,
}

fn relative(num: f64, denom: f64) -> Option<f64> {
    (denom.abs() >= UNDEFINED_DENOMINATOR).then(|| num / denom)
}

impl CollectivityRecord {
    /// ⟨cov⟩°_B / ⟨cov⟩°.
    pub fn rel_cov_b(&self) -> Option<f64> {
        relative(self.cov_b, self.cov_mean_offdiag)
    }

    /// ⟨cov⟩°_L / ⟨corr⟩°.
    pub fn rel_corr_l(&self) -> Option<f64> {
        relative(self.cov_l, self.corr_mean_offdiag)
    }

    pub fn apply_labels(&mut self, th: &Thresholds) {
        let (cov, corr) = classify(self, th);
        self.cov_label = cov;
        self.corr_label = corr;
    }
}

/// Builds a record from the two splits and their source matrices. Labels are
/// left unset; see [`classify`].
pub fn collectivity_measures(
    cov_split: &ModeSplit,
    corr_split: &ModeSplit,
    cov: &SymmetricMatrix,
    corr: &SymmetricMatrix,
    center: NaiveDate,
) -> Result<CollectivityRecord, MatrixError> {
    if cov.dim() != corr.dim() {
        return Err(MatrixError::DimensionMismatch(cov.dim(), corr.dim()));
    }
    for split in [cov_split, corr_split] {
        if split.leading.dim() != cov.dim() {
            return Err(MatrixError::DimensionMismatch(
                cov.dim(),
                split.leading.dim(),
            ));
        }
    }
    let cov_mean_offdiag = mean_offdiagonal(cov)?;
    let corr_mean_offdiag = mean_offdiagonal(corr)?;
    let cov_ble = mean_offdiagonal(&cov_split.leading)?;
    let cov_lle = mean_offdiagonal(&corr_split.leading)?;
    let rel_cov_ble = relative(cov_ble, cov_mean_offdiag);
    let rel_corr_lle = relative(cov_lle, corr_mean_offdiag);
    let flags = Flags {
        cov_tie: cov_split.degenerate,
        corr_tie: corr_split.degenerate,
        cov_undefined: rel_cov_ble.is_none(),
        corr_undefined: rel_corr_lle.is_none(),
        cov_negative_denominator: rel_cov_ble.is_some() && cov_mean_offdiag < 0.0,
        corr_negative_denominator: rel_corr_lle.is_some() && corr_mean_offdiag < 0.0,
        ..Flags::default()
    };
    Ok(CollectivityRecord {
        window: 0,
        center,
        cov_mean_offdiag,
        cov_ble,
        cov_b: mean_offdiagonal(&cov_split.residual)?,
        rel_cov_ble,
        corr_mean_offdiag,
        cov_lle,
        cov_l: mean_offdiagonal(&corr_split.residual)?,
        rel_corr_lle,
        cov_mean_withdiag: mean_with_diagonal(cov),
        corr_mean_withdiag: mean_with_diagonal(corr),
        cov_b2: None,
        cov_l2: None,
        ipr_market: None,
        cov_label: CriterionLabel::NoneLabel,
        corr_label: CriterionLabel::NoneLabel,
        flags,
    })
}

/// Covariance-side label from the relative market share and the absolute
/// market-mode mean.
pub fn classify_cov(rel: Option<f64>, cov_ble: f64, th: &Thresholds) -> CriterionLabel {
    match rel {
        None => CriterionLabel::NoneLabel,
        Some(r) if r > th.high_rel => CriterionLabel::HighCol,
        Some(r) if r < th.low_rel => CriterionLabel::LCol,
        Some(_) if cov_ble > th.abs_ble_floor => CriterionLabel::HighVal,
        Some(_) => CriterionLabel::NoneLabel,
    }
}

/// Correlation-side label; there is no high-value criterion on this side.
pub fn classify_corr(rel: Option<f64>, th: &Thresholds) -> CriterionLabel {
    match rel {
        Some(r) if r > th.high_rel => CriterionLabel::HighCol,
        Some(r) if r < th.low_rel => CriterionLabel::LCol,
        _ => CriterionLabel::NoneLabel,
    }
}

pub fn classify(rec: &CollectivityRecord, th: &Thresholds) -> (CriterionLabel, CriterionLabel) {
    (
        classify_cov(rec.rel_cov_ble, rec.cov_ble, th),
        classify_corr(rec.rel_corr_lle, th),
    )
}

pub const RECORD_COLUMNS: [&str; 17] = [
    "center_date",
    "cov_mean_offdiag",
    "cov_BLE",
    "cov_B",
    "rel_cov_BLE",
    "corr_mean_offdiag",
    "cov_LLE",
    "cov_L",
    "rel_corr_LLE",
    "cov_mean_withdiag",
    "corr_mean_withdiag",
    "cov_B2",
    "cov_L2",
    "ipr_market",
    "cov_label",
    "corr_label",
    "flags",
];

impl CollectivityRecord {
    pub fn to_row(&self) -> Vec<String> {
        vec![
            self.center.format(DATE_FORMAT).to_string(),
            fmt_f64(self.cov_mean_offdiag),
            fmt_f64(self.cov_ble),
            fmt_f64(self.cov_b),
            fmt_opt(self.rel_cov_ble),
            fmt_f64(self.corr_mean_offdiag),
            fmt_f64(self.cov_lle),
            fmt_f64(self.cov_l),
            fmt_opt(self.rel_corr_lle),
            fmt_f64(self.cov_mean_withdiag),
            fmt_f64(self.corr_mean_withdiag),
            fmt_opt(self.cov_b2),
            fmt_opt(self.cov_l2),
            fmt_opt(self.ipr_market),
            self.cov_label.to_string(),
            self.corr_label.to_string(),
            self.flags.to_string(),
        ]
    }

    /// Inverse of [`to_row`](Self::to_row); `window` is the row ordinal.
    pub fn from_row(window: usize, row: &[&str]) -> Result<Self, String> {
        if row.len() != RECORD_COLUMNS.len() {
            return Err(format!(
                "expected {} columns, got {}",
                RECORD_COLUMNS.len(),
                row.len()
            ));
        }
        let num = |i: usize| -> Result<f64, String> {
            row[i]
                .parse()
                .map_err(|_| format!("{}: bad number {:?}", RECORD_COLUMNS[i], row[i]))
        };
        let opt = |i: usize| -> Result<Option<f64>, String> {
            if row[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        Ok(CollectivityRecord {
            window,
            center: NaiveDate::parse_from_str(row[0], DATE_FORMAT)
                .map_err(|_| format!("bad date {:?}", row[0]))?,
            cov_mean_offdiag: num(1)?,
            cov_ble: num(2)?,
            cov_b: num(3)?,
            rel_cov_ble: opt(4)?,
            corr_mean_offdiag: num(5)?,
            cov_lle: num(6)?,
            cov_l: num(7)?,
            rel_corr_lle: opt(8)?,
            cov_mean_withdiag: num(9)?,
            corr_mean_withdiag: num(10)?,
            cov_b2: opt(11)?,
            cov_l2: opt(12)?,
            ipr_market: opt(13)?,
            cov_label: row[14].parse()?,
            corr_label: row[15].parse()?,
            flags: row[16].parse()?,
        })
    }
}

/// One row per window with the fixed column order of [`RECORD_COLUMNS`].
pub fn time_evolution(records: &[CollectivityRecord]) -> Table {
    let mut table = Table::new(&RECORD_COLUMNS);
    for rec in records {
        table.push(rec.to_row());
    }
    table
}

/// Parses a table written by [`time_evolution`].
pub fn read_records(text: &str) -> Result<Vec<CollectivityRecord>, String> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().ne(RECORD_COLUMNS.iter().copied()) {
        return Err("unexpected header; expected the collectivity record columns".into());
    }
    reader
        .records()
        .enumerate()
        .map(|(i, r)| {
            let r = r.map_err(|e| e.to_string())?;
            let fields: Vec<&str> = r.iter().collect();
            CollectivityRecord::from_row(i, &fields).map_err(|e| format!("row {}: {e}", i + 2))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrices::MatrixKind;
    use crate::spectral::{eigendecompose, split_market_mode};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn sym(m: DMatrix<f64>, kind: MatrixKind) -> SymmetricMatrix {
        SymmetricMatrix::from_upper(kind, m).unwrap()
    }

    fn record_for(cov: &SymmetricMatrix, corr: &SymmetricMatrix) -> CollectivityRecord {
        let cs = split_market_mode(&eigendecompose(cov).unwrap()).unwrap();
        let rs = split_market_mode(&eigendecompose(corr).unwrap()).unwrap();
        collectivity_measures(
            &cs,
            &rs,
            cov,
            corr,
            NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn market_only_matrix() {
        let s = sym(DMatrix::from_element(2, 2, 1.0), MatrixKind::Covariance);
        let r = record_for(&s, &s);
        assert!((r.cov_mean_offdiag - 1.0).abs() < 1e-15);
        assert!((r.cov_ble - 1.0).abs() < 1e-15);
        assert!(r.cov_b.abs() < 1e-15);
        assert!((r.rel_cov_ble.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_has_undefined_relatives() {
        let s = sym(DMatrix::identity(3, 3), MatrixKind::Covariance);
        let r = record_for(&s, &s);
        assert_eq!(r.cov_mean_offdiag, 0.0);
        assert_eq!(r.rel_cov_ble, None);
        assert_eq!(r.rel_corr_lle, None);
        assert!(r.flags.cov_undefined && r.flags.corr_undefined && r.flags.cov_tie);
        assert_eq!(
            classify(&r, &Thresholds::default()),
            (CriterionLabel::NoneLabel, CriterionLabel::NoneLabel)
        );
    }

    #[test]
    fn dimension_mismatch() {
        let a = sym(DMatrix::from_element(2, 2, 1.0), MatrixKind::Covariance);
        let b = sym(DMatrix::from_element(3, 3, 1.0), MatrixKind::Correlation);
        let sa = split_market_mode(&eigendecompose(&a).unwrap()).unwrap();
        let sb = split_market_mode(&eigendecompose(&b).unwrap()).unwrap();
        assert!(collectivity_measures(&sa, &sb, &a, &b, NaiveDate::MIN).is_err());
    }

    #[test]
    fn default_threshold_examples() {
        let th = Thresholds::default();
        assert_eq!(
            classify_cov(Some(0.998), 1e-3, &th),
            CriterionLabel::HighCol
        );
        assert_eq!(classify_cov(Some(0.5), 1e-3, &th), CriterionLabel::LCol);
        assert_eq!(classify_cov(Some(0.9), 5e-4, &th), CriterionLabel::HighVal);
        assert_eq!(
            classify_cov(Some(0.9), 1e-4, &th),
            CriterionLabel::NoneLabel
        );
        assert_eq!(classify_corr(Some(0.9), &th), CriterionLabel::NoneLabel);
        assert_eq!(classify_corr(Some(0.998), &th), CriterionLabel::HighCol);
        // boundaries are inclusive for the middle band
        assert_eq!(classify_cov(Some(0.997), 1.0, &th), CriterionLabel::HighVal);
        assert_eq!(classify_cov(Some(0.8), 1.0, &th), CriterionLabel::HighVal);
    }

    #[test]
    fn thresholds_parse() {
        let th: Thresholds = "high=0.99,low=0.5,floor=1e-3".parse().unwrap();
        assert_eq!(
            th,
            Thresholds {
                high_rel: 0.99,
                low_rel: 0.5,
                abs_ble_floor: 1e-3
            }
        );
        assert_eq!("".parse::<Thresholds>().unwrap(), Thresholds::default());
        assert!("high=0.5,low=0.8".parse::<Thresholds>().is_err());
        assert!("floor=0".parse::<Thresholds>().is_err());
        assert!("gamma=1".parse::<Thresholds>().is_err());
    }

    fn brute_offdiag(m: &DMatrix<f64>) -> f64 {
        let k = m.nrows();
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += m[(i, j)];
                }
            }
        }
        s / (k * (k - 1)) as f64
    }

    #[test]
    fn two_block_record_matches_elementwise_pipeline() {
        // blocks 3+3, b=0.4 and 0.25, market offset 0.1, diag 1
        let m = DMatrix::from_fn(6, 6, |i, j| {
            if i == j {
                1.0
            } else if i / 3 == j / 3 {
                0.1 + if i < 3 { 0.4 } else { 0.25 }
            } else {
                0.1
            }
        });
        let cov = sym(m.clone(), MatrixKind::Covariance);
        let corr = sym(m.clone(), MatrixKind::Correlation);
        let r = record_for(&cov, &corr);
        // independent route: power iteration for the market mode, explicit loops for means
        let mut v = nalgebra::DVector::from_element(6, 1.0);
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = &m * &v;
            lambda = v.dot(&w) / v.dot(&v);
            v = w.normalize();
        }
        let leading = lambda * &v * v.transpose();
        let residual = &m - &leading;
        assert!((r.cov_mean_offdiag - brute_offdiag(&m)).abs() < 1e-14);
        assert!((r.cov_ble - brute_offdiag(&leading)).abs() < 1e-10);
        assert!((r.cov_b - brute_offdiag(&residual)).abs() < 1e-10);
        assert!(
            (r.rel_cov_ble.unwrap() - brute_offdiag(&leading) / brute_offdiag(&m)).abs() < 1e-9
        );
        assert!((r.cov_mean_withdiag - m.sum() / 36.0).abs() < 1e-15);
        assert_eq!(r.cov_ble, r.cov_lle);
    }

    #[test]
    fn rows_round_trip() {
        let s = sym(DMatrix::identity(3, 3), MatrixKind::Covariance);
        let mut r = record_for(&s, &s);
        r.cov_b2 = Some(-0.125);
        r.flags.degenerate_rows = 2;
        let table = time_evolution(&[r.clone(), r.clone()]);
        let back = read_records(&table.to_csv_string().unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], CollectivityRecord { window: 1, ..r });
    }

    #[test]
    fn empty_evolution_has_header() {
        let t = time_evolution(&[]);
        assert!(t.is_empty());
        assert_eq!(t.header.len(), 17);
    }

    fn restated(rel: f64, abs: f64) -> CriterionLabel {
        // literal restatement of the three inequalities
        if rel > 0.997 {
            CriterionLabel::HighCol
        } else if rel < 0.8 {
            CriterionLabel::LCol
        } else if (0.8..=0.997).contains(&rel) && abs > 4.1e-4 {
            CriterionLabel::HighVal
        } else {
            CriterionLabel::NoneLabel
        }
    }

    proptest! {
        #[test]
        fn labels_partition_the_plane(rel in -0.5f64..1.5, abs in -1e-3f64..2e-3) {
            let th = Thresholds::default();
            prop_assert_eq!(classify_cov(Some(rel), abs, &th), restated(rel, abs));
            let corr = classify_corr(Some(rel), &th);
            prop_assert_ne!(corr, CriterionLabel::HighVal);
        }

        #[test]
        fn flags_round_trip(bits in 0u8..128, n in 0usize..5) {
            let f = Flags {
                cov_tie: bits & 1 != 0,
                corr_tie: bits & 2 != 0,
                higher_order_tie: bits & 4 != 0,
                cov_undefined: bits & 8 != 0,
                corr_undefined: bits & 16 != 0,
                cov_negative_denominator: bits & 32 != 0,
                corr_negative_denominator: bits & 64 != 0,
                degenerate_rows: n,
            };
            prop_assert_eq!(f.to_string().parse::<Flags>().unwrap(), f);
        }
    }
}
