//! Risk-phase diagram data: per-window points, group centers by criterion
//! and by historical period, market trajectories and event markers.

use std::fmt;

use chrono::NaiveDate;
use thiserror::Error;

use crate::collectivity::{CollectivityRecord, CriterionLabel};
use crate::ingest::DATE_FORMAT;
use crate::output::{fmt_f64, Table};

#[derive(Debug, Error, PartialEq)]
pub enum PhaseError {
    #[error("periods {0} and {1} overlap")]
    Overlap(String, String),

    #[error("period {label} ends ({end}) before it starts ({start})")]
    Reversed {
        label: String,
        start: NaiveDate,
        end: NaiveDate,
    },

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("trajectory range starts after it ends: {from} > {to}")]
    InvalidRange { from: NaiveDate, to: NaiveDate },
}

fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, DATE_FORMAT).expect("valid built-in date")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Period {
    pub label: String,
    pub description: String,
    /// Inclusive.
    pub start: NaiveDate,
    /// Inclusive.
    pub end: NaiveDate,
}

impl Period {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodTable {
    periods: Vec<Period>,
}

const DEFAULT_PERIODS: [(&str, &str, &str, &str); 7] = [
    ("P1", "Nineties", "1990-01-31", "2000-02-08"),
    (
        "P2",
        "Post Dot-com bubble burst",
        "2000-02-09",
        "2002-10-09",
    ),
    ("P3", "Pre-Lehman crash", "2002-10-10", "2007-10-31"),
    ("PA", "Precursor period", "2007-11-01", "2008-08-14"),
    ("P4", "Post-Lehman crash", "2008-08-15", "2015-08-18"),
    ("P5", "Post-China crisis", "2015-08-19", "2020-01-22"),
    (
        "P6",
        "Post 2020 stock market crash",
        "2020-01-23",
        "2021-07-08",
    ),
];

impl Default for PeriodTable {
    fn default() -> Self {
        let periods = DEFAULT_PERIODS
            .iter()
            .map(|(label, description, start, end)| Period {
                label: (*label).into(),
                description: (*description).into(),
                start: date(start),
                end: date(end),
            })
            .collect();
        PeriodTable { periods }
    }
}

impl PeriodTable {
    /// Periods may be given in any order but must not overlap.
    pub fn new(mut periods: Vec<Period>) -> Result<Self, PhaseError> {
        for p in &periods {
            if p.end < p.start {
                return Err(PhaseError::Reversed {
                    label: p.label.clone(),
                    start: p.start,
                    end: p.end,
                });
            }
        }
        periods.sort_by_key(|p| p.start);
        for pair in periods.windows(2) {
            if pair[1].start <= pair[0].end {
                return Err(PhaseError::Overlap(
                    pair[0].label.clone(),
                    pair[1].label.clone(),
                ));
            }
        }
        Ok(Self { periods })
    }

    /// Columns `label,description,start,end`.
    pub fn from_delimited(text: &str) -> Result<Self, PhaseError> {
        let rows = read_rows(text, 4)?;
        let periods = rows
            .into_iter()
            .map(|(line, r)| {
                Ok(Period {
                    label: r[0].clone(),
                    description: r[1].clone(),
                    start: parse_date(&r[2], line)?,
                    end: parse_date(&r[3], line)?,
                })
            })
            .collect::<Result<Vec<_>, PhaseError>>()?;
        Self::new(periods)
    }

    pub fn periods(&self) -> &[Period] {
        &self.periods
    }

    pub fn is_contiguous(&self) -> bool {
        self.periods
            .windows(2)
            .all(|w| w[0].end.succ_opt() == Some(w[1].start))
    }
}

pub fn assign_period(ts: NaiveDate, table: &PeriodTable) -> Option<&str> {
    table
        .periods
        .iter()
        .find(|p| p.contains(ts))
        .map(|p| p.label.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub label: String,
    pub description: String,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTable {
    events: Vec<Event>,
}

const DEFAULT_EVENTS: [(&str, &str, &str); 11] = [
    ("ER", "Early 1990s recession", "1990-07-15"),
    ("AC", "Asian financial crisis", "1997-10-27"),
    ("RC", "Russian financial crisis", "1998-08-17"),
    ("DC", "Dot-com bubble (before burst)", "2000-03-10"),
    ("MD", "Stock market downturn of 2002", "2002-10-09"),
    ("A", "Precursor start", "2007-11-01"),
    ("LB", "Lehman Brothers crash", "2008-09-16"),
    ("ED", "European debt crisis", "2010-04-27"),
    ("AF", "August 2011 stock markets fall", "2011-08-01"),
    ("FC", "The Great Fall of China", "2015-08-18"),
    ("CO", "2020 stock market crash", "2020-02-24"),
];

impl Default for EventTable {
    fn default() -> Self {
        EventTable {
            events: DEFAULT_EVENTS
                .iter()
                .map(|(label, description, d)| Event {
                    label: (*label).into(),
                    description: (*description).into(),
                    date: date(d),
                })
                .collect(),
        }
    }
}

impl EventTable {
    pub fn new(events: Vec<Event>) -> Self {
        Self { events }
    }

    /// Columns `label,description,date`.
    pub fn from_delimited(text: &str) -> Result<Self, PhaseError> {
        let events = read_rows(text, 3)?
            .into_iter()
            .map(|(line, r)| {
                Ok(Event {
                    label: r[0].clone(),
                    description: r[1].clone(),
                    date: parse_date(&r[2], line)?,
                })
            })
            .collect::<Result<Vec<_>, PhaseError>>()?;
        Ok(Self { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }
}

fn parse_date(s: &str, line: u64) -> Result<NaiveDate, PhaseError> {
    NaiveDate::parse_from_str(s, DATE_FORMAT).map_err(|_| PhaseError::Parse {
        line,
        msg: format!("unparsable date {s:?}"),
    })
}

fn read_rows(text: &str, columns: usize) -> Result<Vec<(u64, Vec<String>)>, PhaseError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(crate::ingest::detect_delimiter(text))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| PhaseError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != columns {
            return Err(PhaseError::Parse {
                line,
                msg: format!("expected {columns} columns, got {}", rec.len()),
            });
        }
        out.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(out)
}

/// Which pair of measures spans the diagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum PhaseAxes {
    /// ⟨cov⟩_B against ⟨cov⟩_BLE.
    Cov,
    /// ⟨cov⟩_L against ⟨cov⟩_LLE.
    Corr,
    /// ⟨cov⟩_B2 against ⟨cov⟩_BLE.
    Cov2,
    /// ⟨cov⟩_L2 against ⟨cov⟩_LLE.
    Corr2,
    /// Regression residual collectivity against ⟨cov⟩_LLE.
    Linr,
}

impl PhaseAxes {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseAxes::Cov => "cov",
            PhaseAxes::Corr => "corr",
            PhaseAxes::Cov2 => "cov2",
            PhaseAxes::Corr2 => "corr2",
            PhaseAxes::Linr => "linr",
        }
    }

    pub fn x_name(self) -> &'static str {
        match self {
            PhaseAxes::Cov | PhaseAxes::Cov2 => "cov_BLE",
            _ => "cov_LLE",
        }
    }

    pub fn y_name(self) -> &'static str {
        match self {
            PhaseAxes::Cov => "cov_B",
            PhaseAxes::Corr => "cov_L",
            PhaseAxes::Cov2 => "cov_B2",
            PhaseAxes::Corr2 => "cov_L2",
            PhaseAxes::Linr => "corr_LinR",
        }
    }

    fn covariance_side(self) -> bool {
        matches!(self, PhaseAxes::Cov | PhaseAxes::Cov2)
    }
}

impl fmt::Display for PhaseAxes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub axes: PhaseAxes,
    pub window: usize,
    pub center: NaiveDate,
    pub x: f64,
    pub y: f64,
    pub label: CriterionLabel,
}

/// One point per record with a defined y value. For [`PhaseAxes::Linr`] the
/// y values come from `linr`, indexed like `records`.
pub fn phase_points(
    records: &[CollectivityRecord],
    axes: PhaseAxes,
    linr: Option<&[Option<f64>]>,
) -> Vec<PhasePoint> {
    records
        .iter()
        .enumerate()
        .filter_map(|(n, r)| {
            let (x, label) = if axes.covariance_side() {
                (r.cov_ble, r.cov_label)
            } else {
                (r.cov_lle, r.corr_label)
            };
            let y = match axes {
                PhaseAxes::Cov => Some(r.cov_b),
                PhaseAxes::Corr => Some(r.cov_l),
                PhaseAxes::Cov2 => r.cov_b2,
                PhaseAxes::Corr2 => r.cov_l2,
                PhaseAxes::Linr => linr.and_then(|v| v.get(n).copied().flatten()),
            }?;
            Some(PhasePoint {
                axes,
                window: r.window,
                center: r.center,
                x,
                y,
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKey {
    Criterion(CriterionLabel),
    Period(String),
}

impl GroupKey {
    pub fn kind(&self) -> &'static str {
        match self {
            GroupKey::Criterion(_) => "criterion",
            GroupKey::Period(_) => "period",
        }
    }

    pub fn name(&self) -> String {
        match self {
            GroupKey::Criterion(l) => l.to_string(),
            GroupKey::Period(p) => p.clone(),
        }
    }
}

/// Groups a point belongs to. By default criterion-labeled points are kept
/// out of the period groups, so each point lands in at most one group.
pub fn assign_groups(
    point: &PhasePoint,
    table: &PeriodTable,
    labeled_in_periods: bool,
) -> Vec<GroupKey> {
    let mut keys = Vec::with_capacity(2);
    if point.label.is_criterion() {
        keys.push(GroupKey::Criterion(point.label));
    }
    if !point.label.is_criterion() || labeled_in_periods {
        if let Some(p) = assign_period(point.center, table) {
            keys.push(GroupKey::Period(p.to_owned()));
        }
    }
    keys
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMean {
    pub key: GroupKey,
    pub mean_x: f64,
    pub mean_y: f64,
    pub count: usize,
}

/// Arithmetic means per group, criterion groups first, then periods in
/// chronological order. Empty groups are omitted and listed in the notes.
pub fn group_means(
    points: &[PhasePoint],
    table: &PeriodTable,
    labeled_in_periods: bool,
) -> (Vec<GroupMean>, Vec<String>) {
    let mut keys: Vec<GroupKey> = [
        CriterionLabel::HighCol,
        CriterionLabel::LCol,
        CriterionLabel::HighVal,
    ]
    .into_iter()
    .map(GroupKey::Criterion)
    .collect();
    keys.extend(
        table
            .periods()
            .iter()
            .map(|p| GroupKey::Period(p.label.clone())),
    );
    let memberships: Vec<Vec<GroupKey>> = points
        .iter()
        .map(|p| assign_groups(p, table, labeled_in_periods))
        .collect();

    let mut means = Vec::new();
    let mut notes = Vec::new();
    for key in keys {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (p, m) in points.iter().zip(&memberships) {
            if m.contains(&key) {
                sx += p.x;
                sy += p.y;
                n += 1;
            }
        }
        if n == 0 {
            // the correlation side never carries HighVal, so only report
            // groups that could have been populated
            let possible = !matches!(key, GroupKey::Criterion(CriterionLabel::HighVal))
                || points.iter().any(|p| p.axes.covariance_side());
            if possible {
                notes.push(format!("group {} is empty", key.name()));
            }
            continue;
        }
        means.push(GroupMean {
            key,
            mean_x: sx / n as f64,
            mean_y: sy / n as f64,
            count: n,
        });
    }
    (means, notes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub point: PhasePoint,
    /// Displacement to the next point; zero for the last one.
    pub dx: f64,
    pub dy: f64,
}

/// Points with centers in `[from, to]`, chronologically, with step vectors.
pub fn trajectory(
    points: &[PhasePoint],
    from: NaiveDate,
    to: NaiveDate,
) -> Result<Vec<TrajectoryStep>, PhaseError> {
    if from > to {
        return Err(PhaseError::InvalidRange { from, to });
    }
    let mut inside: Vec<&PhasePoint> = points
        .iter()
        .filter(|p| from <= p.center && p.center <= to)
        .collect();
    inside.sort_by_key(|p| (p.center, p.window));
    Ok(inside
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (dx, dy) = inside
                .get(i + 1)
                .map(|next| (next.x - p.x, next.y - p.y))
                .unwrap_or((0.0, 0.0));
            TrajectoryStep {
                point: (*p).clone(),
                dx,
                dy,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventMarker {
    pub event: Event,
    pub window: usize,
    pub center: NaiveDate,
}

/// Maps each event to the window whose center is nearest; ties go to the
/// earlier window. Events outside the span of centers are dropped and
/// returned as warnings. `centers` must be sorted ascending.
pub fn annotate_events(
    centers: &[(usize, NaiveDate)],
    table: &EventTable,
) -> (Vec<EventMarker>, Vec<String>) {
    let mut markers = Vec::new();
    let mut dropped = Vec::new();
    let (Some(first), Some(last)) = (centers.first(), centers.last()) else {
        dropped.extend(
            table
                .events()
                .iter()
                .map(|e| format!("event {} ({}) dropped: no windows", e.label, e.date)),
        );
        return (markers, dropped);
    };
    for e in table.events() {
        if e.date < first.1 || e.date > last.1 {
            let msg = format!("event {} ({}) is outside the data range", e.label, e.date);
            log::warn!("{msg}");
            dropped.push(msg);
            continue;
        }
        let pos = centers.partition_point(|(_, c)| *c < e.date);
        let best = if pos < centers.len() && centers[pos].1 == e.date {
            pos
        } else {
            // centers[pos - 1] < date < centers[pos]
            let before = (e.date - centers[pos - 1].1).num_days();
            let after = (centers[pos].1 - e.date).num_days();
            if before <= after {
                pos - 1
            } else {
                pos
            }
        };
        markers.push(EventMarker {
            event: e.clone(),
            window: centers[best].0,
            center: centers[best].1,
        });
    }
    (markers, dropped)
}

fn log10_or_empty(x: f64) -> String {
    if x > 0.0 {
        fmt_f64(x.log10())
    } else {
        String::new()
    }
}

pub fn phase_points_table(points: &[PhasePoint], table: &PeriodTable) -> Table {
    let mut t = Table::new(&[
        "axes",
        "center_date",
        "x",
        "y",
        "x_log10",
        "label",
        "period",
    ]);
    for p in points {
        t.push(vec![
            p.axes.to_string(),
            p.center.format(DATE_FORMAT).to_string(),
            fmt_f64(p.x),
            fmt_f64(p.y),
            log10_or_empty(p.x),
            p.label.to_string(),
            assign_period(p.center, table).unwrap_or("").to_owned(),
        ]);
    }
    t
}

pub fn group_means_table(rows: &[(PhaseAxes, GroupMean)]) -> Table {
    let mut t = Table::new(&[
        "axes",
        "group_kind",
        "group",
        "mean_x",
        "mean_y",
        "mean_x_log10",
        "count",
    ]);
    for (axes, g) in rows {
        t.push(vec![
            axes.to_string(),
            g.key.kind().to_owned(),
            g.key.name(),
            fmt_f64(g.mean_x),
            fmt_f64(g.mean_y),
            log10_or_empty(g.mean_x),
            g.count.to_string(),
        ]);
    }
    t
}

pub fn trajectory_table(steps: &[TrajectoryStep]) -> Table {
    let mut t = Table::new(&["axes", "center_date", "x", "y", "dx", "dy", "label"]);
    for s in steps {
        t.push(vec![
            s.point.axes.to_string(),
            s.point.center.format(DATE_FORMAT).to_string(),
            fmt_f64(s.point.x),
            fmt_f64(s.point.y),
            fmt_f64(s.dx),
            fmt_f64(s.dy),
            s.point.label.to_string(),
        ]);
    }
    t
}

pub fn events_table(markers: &[EventMarker]) -> Table {
    let mut t = Table::new(&[
        "label",
        "description",
        "event_date",
        "window",
        "center_date",
    ]);
    for m in markers {
        t.push(vec![
            m.event.label.clone(),
            m.event.description.clone(),
            m.event.date.format(DATE_FORMAT).to_string(),
            m.window.to_string(),
            m.center.format(DATE_FORMAT).to_string(),
        ]);
    }
    t
}
