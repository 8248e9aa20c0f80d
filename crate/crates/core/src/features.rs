//! Lag schedules, per-date feature rows, dataset assembly and the
//! leakage-safe train/validation/test split plans.
//!
//! Feature columns per date, in order: for each of the eight gridded
//! variables (see [`VARIABLES`]) its ten PCs, then the eight climate indices
//! (see [`INDICES`]), 88 columns. Sequence modes repeat that block once per
//! schedule date, oldest date first.

use std::fmt;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::climatology::{
    fit_two_week_climatology, recent_anomaly, two_week_target, Climatology, TargetSeries, TARGET_HORIZON,
};
use crate::eof::{fit_eof, EofBasis};
use crate::error::{Error, Result};
use crate::ingest::{GriddedField, IndexSeries};
use crate::timegrid::{days_in_month, Date, DateRange};

pub const VARIABLES: [&str; 8] = ["tmp2m", "sm", "sst_pacific", "sst_atlantic", "rhum", "slp", "hgt10", "hgt500"];
pub const INDICES: [&str; 8] = ["mei", "nino12", "nino3", "nino34", "nino4", "nao", "mjo_phase", "mjo_amplitude"];
pub const PCS_PER_VARIABLE: usize = 10;
pub const FEATURES_PER_DATE: usize = VARIABLES.len() * PCS_PER_VARIABLE + INDICES.len();
pub const SCHEDULE_LEN: usize = 18;

/// Offsets around the same day of year in the two previous years.
const PAST_YEAR_OFFSETS: [i64; 7] = [-28, -14, -7, 0, 7, 14, 28];
const RECENT_OFFSETS: [i64; 4] = [-28, -14, -7, 0];

/// The 18 historical dates feeding the forecast for `t`, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LagSchedule {
    pub target_date: Date,
    pub dates: Vec<Date>,
}

pub fn lag_schedule(t: Date) -> LagSchedule {
    let mut dates = Vec::with_capacity(SCHEDULE_LEN);
    for back in [2, 1] {
        let s = t.same_doy_in_year(t.year() - back);
        dates.extend(PAST_YEAR_OFFSETS.iter().map(|&k| s.add_days(k)));
    }
    dates.extend(RECENT_OFFSETS.iter().map(|&k| t.add_days(k)));
    dates.sort();
    assert!(dates.windows(2).all(|w| w[0] < w[1]), "duplicate schedule dates for {t}");
    debug_assert_eq!(dates.len(), SCHEDULE_LEN);
    LagSchedule { target_date: t, dates }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FeatureMode {
    OneDay,
    FourDays,
    AllDays,
}

impl FeatureMode {
    pub fn steps(self) -> usize {
        match self {
            FeatureMode::OneDay => 1,
            FeatureMode::FourDays => 4,
            FeatureMode::AllDays => SCHEDULE_LEN,
        }
    }

    pub fn dates(self, t: Date) -> Vec<Date> {
        match self {
            FeatureMode::OneDay => vec![t],
            FeatureMode::FourDays => RECENT_OFFSETS.iter().map(|&k| t.add_days(k)).collect(),
            FeatureMode::AllDays => lag_schedule(t).dates,
        }
    }

    /// Labels for each step relative to `t`, e.g. `y0-7` or `y2+28`.
    pub fn step_labels(self) -> Vec<String> {
        let t = Date::ymd(2018, 3, 1);
        self.dates(t)
            .into_iter()
            .map(|d| {
                let back = t.year() - d.year() + if d.year() < t.year() && d > t.same_doy_in_year(d.year()).add_days(28) { 1 } else { 0 };
                let anchor = t.same_doy_in_year(t.year() - back);
                format!("y{back}{:+}", d.days_since(anchor))
            })
            .collect()
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::OneDay => "one_day",
            FeatureMode::FourDays => "four_days",
            FeatureMode::AllDays => "all_days",
        })
    }
}

/// Temporally global (every month) or local (months near the test month) training pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Local { month: u32 },
}

/// Months admitted on either side of the test month under local scope.
pub const LOCAL_MONTH_RADIUS: u32 = 2;

impl Scope {
    pub fn admits(self, d: Date) -> bool {
        match self {
            Scope::Global => true,
            Scope::Local { month } => {
                let diff = (d.month() as i32 - month as i32).rem_euclid(12);
                diff.min(12 - diff) as u32 <= LOCAL_MONTH_RADIUS
            }
        }
    }
}

pub fn feature_names() -> Vec<String> {
    VARIABLES
        .iter()
        .flat_map(|v| (1..=PCS_PER_VARIABLE).map(move |k| format!("{v}_pc{k}")))
        .chain(INDICES.iter().map(|s| s.to_string()))
        .collect()
}

pub fn column_names(mode: FeatureMode) -> Vec<String> {
    let names = feature_names();
    if mode == FeatureMode::OneDay {
        return names;
    }
    mode.step_labels()
        .into_iter()
        .flat_map(|step| names.iter().map(move |n| format!("{step}:{n}")).collect::<Vec<_>>())
        .collect()
}

/// Whether column `j` of a per-date block is a PC (z-scored before fitting) or a raw index.
pub fn is_pc_column(j: usize) -> bool {
    j % FEATURES_PER_DATE < VARIABLES.len() * PCS_PER_VARIABLE
}

/// Group of a per-date column: 0..8 the variable PC blocks, 8 the index block.
pub fn column_group(j: usize) -> usize {
    let k = j % FEATURES_PER_DATE;
    (k / PCS_PER_VARIABLE).min(VARIABLES.len())
}

pub const N_GROUPS: usize = VARIABLES.len() + 1;

pub fn group_names() -> Vec<String> {
    VARIABLES.iter().map(|s| s.to_string()).chain(std::iter::once("indices".to_string())).collect()
}

/// Raw per-date feature rows (PC projections and index values).
#[derive(Clone, Debug, PartialEq)]
pub struct DailyFeatures {
    pub start: Date,
    /// `n_dates x 88`.
    pub values: Array2<f64>,
}

impl DailyFeatures {
    /// Projects each field on its basis and appends the index values, over
    /// the dates covered by every input.
    pub fn build(fields: &[GriddedField], bases: &[EofBasis], indices: &[IndexSeries]) -> Result<Self> {
        if fields.len() != VARIABLES.len() || bases.len() != VARIABLES.len() || indices.len() != INDICES.len() {
            return Err(Error::InvalidInput(format!(
                "need {} fields/bases and {} indices, got {}/{}/{}",
                VARIABLES.len(),
                INDICES.len(),
                fields.len(),
                bases.len(),
                indices.len()
            )));
        }
        for (i, (f, b)) in fields.iter().zip(bases).enumerate() {
            if f.name != VARIABLES[i] || b.variable != VARIABLES[i] || b.k() != PCS_PER_VARIABLE {
                return Err(Error::InvalidInput(format!("expected variable {} with {PCS_PER_VARIABLE} PCs in slot {i}", VARIABLES[i])));
            }
        }
        for (i, s) in indices.iter().enumerate() {
            if s.name != INDICES[i] {
                return Err(Error::InvalidInput(format!("expected index {} in slot {i}, found {}", INDICES[i], s.name)));
            }
        }
        let start = fields.iter().map(|f| f.start).chain(indices.iter().map(|s| s.start)).max().unwrap();
        let end = fields
            .iter()
            .map(|f| f.dates().end)
            .chain(indices.iter().map(|s| s.dates().end))
            .min()
            .unwrap();
        let range = DateRange::new(start, end);
        if range.is_empty() {
            return Err(Error::Empty("inputs share no dates".into()));
        }
        let mut values = Array2::zeros((range.len(), FEATURES_PER_DATE));
        for (v, (f, b)) in fields.iter().zip(bases).enumerate() {
            let sub = f.slice_dates(range)?;
            let pcs = b.project_field(&sub)?;
            values.slice_mut(s![.., v * PCS_PER_VARIABLE..(v + 1) * PCS_PER_VARIABLE]).assign(&pcs);
        }
        let off = VARIABLES.len() * PCS_PER_VARIABLE;
        for (i, series) in indices.iter().enumerate() {
            for (t, d) in range.iter().enumerate() {
                values[[t, off + i]] = series.get(d).expect("inside shared range");
            }
        }
        Ok(Self { start, values })
    }

    pub fn dates(&self) -> DateRange {
        DateRange::from_len(self.start, self.values.nrows())
    }

    pub fn row(&self, d: Date) -> Option<ArrayView1<'_, f64>> {
        let k = d.days_since(self.start);
        (k >= 0 && (k as usize) < self.values.nrows()).then(|| self.values.row(k as usize))
    }
}

/// Everything the models consume: daily feature rows, week 3-4 targets and
/// the week -2/-1 anomalies.
#[derive(Clone, Debug)]
pub struct ForecastData {
    pub features: DailyFeatures,
    pub targets: TargetSeries,
    pub recent: TargetSeries,
}

/// Feature matrix plus targets for one forecast date.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub target_date: Date,
    /// `H x 88`, oldest date first.
    pub features: Array2<f64>,
    pub target: Array1<f64>,
}

impl ForecastData {
    pub fn n_cells(&self) -> usize {
        self.targets.n_cells()
    }

    /// A date is usable when its target, recent anomaly and every schedule date are available.
    pub fn is_valid(&self, t: Date, mode: FeatureMode) -> bool {
        self.targets.index_of(t).is_some()
            && self.recent.index_of(t).is_some()
            && mode.dates(t).into_iter().all(|d| self.features.row(d).is_some())
    }

    pub fn valid_dates(&self, range: DateRange, mode: FeatureMode) -> Vec<Date> {
        range.iter().filter(|&t| self.is_valid(t, mode)).collect()
    }

    pub fn build_sample(&self, t: Date, mode: FeatureMode) -> Result<SequenceSample> {
        let dates = mode.dates(t);
        let mut features = Array2::zeros((dates.len(), FEATURES_PER_DATE));
        for (h, d) in dates.iter().enumerate() {
            let row = self.features.row(*d).ok_or_else(|| Error::OutOfRange {
                date: d.to_string(),
                context: format!("feature coverage for {t} ({mode})"),
            })?;
            features.row_mut(h).assign(&row);
        }
        let target = self
            .targets
            .row(t)
            .ok_or_else(|| Error::OutOfRange { date: t.to_string(), context: "target".into() })?
            .to_owned();
        Ok(SequenceSample { target_date: t, features, target })
    }

    /// Flattened design matrix (`n x H*88`) for the given dates.
    pub fn design(&self, dates: &[Date], mode: FeatureMode) -> Result<Array2<f64>> {
        let width = mode.steps() * FEATURES_PER_DATE;
        let mut x = Array2::zeros((dates.len(), width));
        for (i, &t) in dates.iter().enumerate() {
            for (h, d) in mode.dates(t).into_iter().enumerate() {
                let row = self.features.row(d).ok_or_else(|| Error::OutOfRange {
                    date: d.to_string(),
                    context: format!("feature coverage for {t} ({mode})"),
                })?;
                x.slice_mut(s![i, h * FEATURES_PER_DATE..(h + 1) * FEATURES_PER_DATE]).assign(&row);
            }
        }
        Ok(x)
    }

    pub fn target_rows(&self, dates: &[Date]) -> Result<Array2<f64>> {
        rows_of(&self.targets, dates, "target")
    }

    pub fn recent_rows(&self, dates: &[Date]) -> Result<Array2<f64>> {
        rows_of(&self.recent, dates, "recent anomaly")
    }
}

/// Fit ranges for the preprocessing step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Inclusive reference years of the two-week climatology.
    pub ref_years: (i32, i32),
    /// Inclusive years the EOF bases are fitted on.
    pub eof_years: (i32, i32),
    pub pool_window: u32,
}

/// Climatology, EOF bases and the derived model inputs.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub c14: Climatology,
    pub bases: Vec<EofBasis>,
    pub data: ForecastData,
}

/// Fits the two-week climatology on `tmp2m` (the first field) and one EOF
/// basis per variable, then builds targets, recent anomalies and daily rows.
pub fn preprocess(fields: &[GriddedField], indices: &[IndexSeries], cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let tmp2m = fields.first().ok_or_else(|| Error::Empty("no fields".into()))?;
    let c14 = fit_two_week_climatology(tmp2m, cfg.ref_years, cfg.pool_window)?;
    let targets = two_week_target(tmp2m, &c14)?;
    let recent = recent_anomaly(tmp2m, &c14)?;
    let bases = fields
        .iter()
        .map(|f| fit_eof(f, cfg.eof_years, PCS_PER_VARIABLE))
        .collect::<Result<Vec<_>>>()?;
    let features = DailyFeatures::build(fields, &bases, indices)?;
    Ok(Preprocessed { c14, bases, data: ForecastData { features, targets, recent } })
}

pub(crate) fn rows_of(series: &TargetSeries, dates: &[Date], what: &str) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((dates.len(), series.n_cells()));
    for (i, &d) in dates.iter().enumerate() {
        let row = series
            .row(d)
            .ok_or_else(|| Error::OutOfRange { date: d.to_string(), context: what.to_string() })?;
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

/// Assembled design matrix and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mode: FeatureMode,
    pub columns: Vec<String>,
    pub dates: Vec<Date>,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

pub fn assemble_dataset(data: &ForecastData, range: DateRange, mode: FeatureMode, scope: Scope) -> Result<Dataset> {
    let dates: Vec<Date> = data.valid_dates(range, mode).into_iter().filter(|&d| scope.admits(d)).collect();
    if dates.is_empty() {
        return Err(Error::Empty(format!("no valid dates in {}..{} for {mode}", range.start, range.end)));
    }
    Ok(Dataset {
        mode,
        columns: column_names(mode),
        x: data.design(&dates, mode)?,
        y: data.target_rows(&dates)?,
        dates,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    mode: FeatureMode,
    columns: Vec<String>,
    dates: Vec<Date>,
    n_targets: usize,
    payload: String,
}

pub fn encode_f64_le<'a>(values: impl IntoIterator<Item = &'a f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64_le(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

/// JSON header plus a little-endian `f64` payload holding `x` then `y`, row-major.
pub fn write_dataset(ds: &Dataset, header_path: &Path) -> Result<()> {
    let stem = header_path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let payload = format!("{stem}.bin");
    let header = DatasetHeader {
        mode: ds.mode,
        columns: ds.columns.clone(),
        dates: ds.dates.clone(),
        n_targets: ds.y.ncols(),
        payload: payload.clone(),
    };
    let mut bytes = encode_f64_le(ds.x.iter());
    bytes.extend(encode_f64_le(ds.y.iter()));
    let bin = header_path.parent().unwrap_or_else(|| Path::new(".")).join(payload);
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    std::fs::write(header_path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(header_path, e))
}

pub fn read_dataset(header_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let h: DatasetHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest { path: header_path.to_path_buf(), message: e.to_string() })?;
    let bin = header_path.parent().unwrap_or_else(|| Path::new(".")).join(&h.payload);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let (n, p, g) = (h.dates.len(), h.columns.len(), h.n_targets);
    if bytes.len() != 8 * n * (p + g) {
        return Err(Error::PayloadLength { expected: n * (p + g), found: bytes.len() / 8 });
    }
    let vals = decode_f64_le(&bytes);
    let x = Array2::from_shape_vec((n, p), vals[..n * p].to_vec()).map_err(|e| Error::Dimension(e.to_string()))?;
    let y = Array2::from_shape_vec((n, g), vals[n * p..].to_vec()).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(Dataset { mode: h.mode, columns: h.columns, dates: h.dates, x, y })
}

/// Per-column standardization fitted on training rows; only PC columns are
/// rescaled, index columns pass through.
#[derive(Clone, Debug, PartialEq)]
pub struct PcScaler {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl PcScaler {
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Array1::zeros(x.ncols());
        let mut scale = Array1::ones(x.ncols());
        for j in (0..x.ncols()).filter(|&j| is_pc_column(j)) {
            let col = x.column(j);
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            scale[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }
}

/// Weekly (or other fixed-step) forecast dates anchored at a fixed date.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cadence {
    pub anchor: Date,
    pub step_days: i64,
}

impl Cadence {
    pub fn weekly(anchor: Date) -> Self {
        Self { anchor, step_days: 7 }
    }

    /// Cadence dates falling in the given calendar month.
    pub fn dates_in_month(&self, year: i32, month: u32) -> Vec<Date> {
        let first = Date::ymd(year, month, 1);
        let last = Date::ymd(year, month, days_in_month(year, month));
        let k0 = first.days_since(self.anchor).div_euclid(self.step_days)
            + i64::from(first.days_since(self.anchor).rem_euclid(self.step_days) != 0);
        (k0..)
            .map(|k| self.anchor.add_days(k * self.step_days))
            .take_while(|&d| d <= last)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub n_folds: usize,
    pub fold_train_years: i32,
    pub final_train_years: i32,
    /// Gap in days between the end of a training range and its evaluation set.
    pub gap_days: i64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { n_folds: 5, fold_train_years: 10, final_train_years: 30, gap_days: TARGET_HORIZON }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: DateRange,
    pub validation: Vec<Date>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_month: (i32, u32),
    pub test_dates: Vec<Date>,
    /// Half-open; its end lies `gap_days` before the first test date.
    pub final_train: DateRange,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn id(&self) -> String {
        format!("{:04}-{:02}", self.test_month.0, self.test_month.1)
    }

    /// Every (train, eval) pair of the plan.
    pub fn pairs(&self) -> impl Iterator<Item = (DateRange, &[Date])> {
        self.folds
            .iter()
            .map(|f| (f.train, f.validation.as_slice()))
            .chain(std::iter::once((self.final_train, self.test_dates.as_slice())))
    }

    /// Checks that no training target depends on observations at or after
    /// the first evaluation date.
    pub fn check_leakage(&self) -> Result<()> {
        for (train, eval) in self.pairs() {
            let (Some(last), Some(&first_eval)) = (train.last(), eval.iter().min()) else {
                continue;
            };
            if last.add_days(TARGET_HORIZON) >= first_eval {
                return Err(Error::InvalidInput(format!(
                    "plan {}: training date {last} depends on data up to {}, not before evaluation date {first_eval}",
                    self.id(),
                    last.add_days(TARGET_HORIZON)
                )));
            }
        }
        Ok(())
    }
}

pub fn month_dates(year: i32, month: u32) -> Vec<Date> {
    (1..=days_in_month(year, month)).map(|d| Date::ymd(year, month, d)).collect()
}

/// Split plan for one test month: cadence test dates, a final training range
/// ending `gap_days` before the first of them, and `n_folds` same-month
/// validation sets in the preceding years, each with its own sliding
/// training window.
pub fn make_split_plan(test_month: (i32, u32), data_start: Date, cadence: Cadence, config: &PlanConfig) -> Result<SplitPlan> {
    let (year, month) = test_month;
    if !(1..=12).contains(&month) {
        return Err(Error::InvalidInput(format!("month {month} out of range")));
    }
    if config.gap_days < TARGET_HORIZON {
        return Err(Error::InvalidInput(format!("gap of {} days is shorter than the target horizon", config.gap_days)));
    }
    let test_dates = cadence.dates_in_month(year, month);
    let first_test = *test_dates
        .first()
        .ok_or_else(|| Error::Empty(format!("no cadence dates in {year:04}-{month:02}")))?;
    let mut folds = Vec::with_capacity(config.n_folds);
    for i in 1..=config.n_folds as i32 {
        let validation = month_dates(year - i, month);
        let end = validation[0].add_days(-config.gap_days);
        let start = end.add_years(-config.fold_train_years);
        if start < data_start {
            return Err(Error::InsufficientHistory(format!(
                "fold {i} of {year:04}-{month:02} needs data from {start}, data starts {data_start}"
            )));
        }
        folds.push(Fold { train: DateRange::new(start, end), validation });
    }
    let end = first_test.add_days(-config.gap_days);
    let start = end.add_years(-config.final_train_years).max(data_start);
    Ok(SplitPlan { test_month, test_dates, final_train: DateRange::new(start, end), folds })
}

/// One plan per month of each year in `years` (inclusive).
pub fn monthly_plans(years: (i32, i32), data_start: Date, cadence: Cadence, config: &PlanConfig) -> Result<Vec<SplitPlan>> {
    (years.0..=years.1)
        .flat_map(|y| (1..=12).map(move |m| (y, m)))
        .map(|tm| make_split_plan(tm, data_start, cadence, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn schedule_example() {
        let s = lag_schedule(Date::ymd(2018, 3, 1));
        assert_eq!(s.dates.len(), 18);
        for d in [Date::ymd(2018, 2, 1), Date::ymd(2017, 3, 8), Date::ymd(2016, 2, 16), Date::ymd(2016, 3, 1), Date::ymd(2017, 3, 1)] {
            assert!(s.dates.contains(&d), "{d}");
        }
        assert_eq!(*s.dates.last().unwrap(), Date::ymd(2018, 3, 1));
        assert_eq!(s.dates[0], Date::ymd(2016, 3, 1).add_days(-28));
    }

    #[test]
    fn schedule_cardinality_random_dates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let t = Date::ymd(1990, 1, 1).add_days(rng.random_range(0..12_000));
            let s = lag_schedule(t);
            assert_eq!(s.dates.len(), 18);
            assert_eq!(*s.dates.last().unwrap(), t);
            assert_eq!(s.dates[0], t.same_doy_in_year(t.year() - 2).add_days(-28));
            assert!(s.dates.iter().all(|&d| d <= t));
        }
    }

    #[test]
    fn mode_widths_and_labels() {
        assert_eq!(FEATURES_PER_DATE, 88);
        assert_eq!(column_names(FeatureMode::OneDay).len(), 88);
        assert_eq!(column_names(FeatureMode::AllDays).len(), 18 * 88);
        let labels = FeatureMode::AllDays.step_labels();
        assert_eq!(labels.first().unwrap(), "y2-28");
        assert_eq!(labels.last().unwrap(), "y0+0");
        let unique: std::collections::BTreeSet<_> = column_names(FeatureMode::AllDays).into_iter().collect();
        assert_eq!(unique.len(), 18 * 88);
        assert_eq!(FeatureMode::FourDays.step_labels(), vec!["y0-28", "y0-14", "y0-7", "y0+0"]);
    }

    #[test]
    fn groups_partition_columns() {
        let mut counts = [0usize; N_GROUPS];
        for j in 0..FEATURES_PER_DATE {
            counts[column_group(j)] += 1;
        }
        assert_eq!(counts, [10, 10, 10, 10, 10, 10, 10, 10, 8]);
        assert!(is_pc_column(79) && !is_pc_column(80) && is_pc_column(88));
    }

    #[test]
    fn local_scope_months() {
        let june = Scope::Local { month: 6 };
        let admitted: Vec<u32> = (1..=12).filter(|&m| june.admits(Date::ymd(2010, m, 10))).collect();
        assert_eq!(admitted, vec![4, 5, 6, 7, 8]);
        let jan = Scope::Local { month: 1 };
        let admitted: Vec<u32> = (1..=12).filter(|&m| jan.admits(Date::ymd(2010, m, 10))).collect();
        assert_eq!(admitted, vec![1, 2, 3, 11, 12]);
        // union over all months covers every month
        for m in 1..=12 {
            assert!((1..=12).any(|tm| Scope::Local { month: tm }.admits(Date::ymd(2010, m, 1))));
        }
    }

    #[test]
    fn plan_for_january_2017() {
        let plan = make_split_plan((2017, 1), Date::ymd(1979, 1, 1), Cadence::weekly(Date::ymd(2017, 1, 1)), &PlanConfig::default()).unwrap();
        assert_eq!(plan.test_dates, [1, 8, 15, 22, 29].map(|d| Date::ymd(2017, 1, d)));
        assert_eq!(plan.final_train.end, Date::ymd(2016, 12, 4));
        assert_eq!(plan.final_train.start, Date::ymd(1986, 12, 4));
        let fold1 = &plan.folds[0];
        assert_eq!(fold1.validation[0], Date::ymd(2016, 1, 1));
        assert_eq!(fold1.train, DateRange::new(Date::ymd(2005, 12, 4), Date::ymd(2015, 12, 4)));
        let fold5 = &plan.folds[4];
        assert_eq!(fold5.validation[0], Date::ymd(2012, 1, 1));
        plan.check_leakage().unwrap();
    }

    #[test]
    fn weekly_cadence_gives_105_dates() {
        let plans = monthly_plans((2017, 2018), Date::ymd(1979, 1, 1), Cadence::weekly(Date::ymd(2017, 1, 1)), &PlanConfig::default()).unwrap();
        assert_eq!(plans.len(), 24);
        let total: usize = plans.iter().map(|p| p.test_dates.len()).sum();
        assert_eq!(total, 105);
        for p in &plans {
            p.check_leakage().unwrap();
        }
    }

    #[test]
    fn insufficient_history_errors() {
        let r = make_split_plan((2017, 1), Date::ymd(2005, 1, 1), Cadence::weekly(Date::ymd(2017, 1, 1)), &PlanConfig::default());
        assert!(matches!(r, Err(Error::InsufficientHistory(_))));
    }

    #[test]
    fn leaking_plan_is_detected() {
        let mut plan = make_split_plan((2017, 3), Date::ymd(1990, 1, 1), Cadence::weekly(Date::ymd(2017, 1, 1)), &PlanConfig::default()).unwrap();
        plan.final_train.end = plan.final_train.end.add_days(1);
        assert!(plan.check_leakage().is_err());
    }

    fn toy_data(start: Date, n: usize) -> ForecastData {
        let values = Array2::from_shape_fn((n, FEATURES_PER_DATE), |(t, j)| (t * 100 + j) as f64);
        let targets = TargetSeries { start, cells: vec![0, 1], values: Array2::from_shape_fn((n - 28, 2), |(t, g)| (t + g) as f64) };
        let recent = TargetSeries { start: start.add_days(14), cells: vec![0, 1], values: Array2::zeros((n - 14, 2)) };
        ForecastData { features: DailyFeatures { start, values }, targets, recent }
    }

    #[test]
    fn samples_and_dataset_shapes() {
        let start = Date::ymd(2009, 1, 1);
        let data = toy_data(start, 365 * 4);
        let t = Date::ymd(2012, 3, 1);
        let one = data.build_sample(t, FeatureMode::OneDay).unwrap();
        assert_eq!(one.features.dim(), (1, 88));
        let all = data.build_sample(t, FeatureMode::AllDays).unwrap();
        assert_eq!(all.features.dim(), (18, 88));
        assert_eq!(all.features.row(17), one.features.row(0));
        assert_eq!(data.build_sample(t, FeatureMode::AllDays).unwrap(), all);
        // early dates lack two years of lags
        assert!(data.build_sample(Date::ymd(2010, 3, 1), FeatureMode::AllDays).is_err());
        let year = DateRange::new(Date::ymd(2010, 1, 1), Date::ymd(2011, 1, 1));
        let ds = assemble_dataset(&data, year, FeatureMode::OneDay, Scope::Global).unwrap();
        assert_eq!(ds.dates.len(), 365);
        let first_year = DateRange::new(start, Date::ymd(2010, 1, 1));
        let ds = assemble_dataset(&data, first_year, FeatureMode::OneDay, Scope::Global).unwrap();
        // first 14 days have no recent anomaly
        assert_eq!(ds.dates.len(), 365 - 14);
        let local = assemble_dataset(&data, year, FeatureMode::OneDay, Scope::Local { month: 6 }).unwrap();
        assert!(local.dates.iter().all(|d| ds.dates.contains(d) || year.contains(*d)));
        assert_eq!(local.dates.len(), 30 + 31 + 30 + 31 + 31);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(Date::ymd(2009, 1, 1), 365 * 3);
        let ds = assemble_dataset(&data, DateRange::new(Date::ymd(2011, 2, 1), Date::ymd(2011, 3, 1)), FeatureMode::AllDays, Scope::Global).unwrap();
        let path = dir.path().join("ds.json");
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn scaler_only_touches_pcs() {
        let x = Array2::from_shape_fn((10, 88), |(i, j)| (i * j) as f64 + 1.0);
        let sc = PcScaler::fit(&x);
        let z = sc.transform(&x);
        assert!(z.column(3).sum().abs() < 1e-9);
        assert_eq!(z.column(85), x.column(85));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn random_plans_never_leak(year in 2000i32..2030, month in 1u32..=12, anchor_off in 0i64..7, folds in 1usize..6, fy in 1i32..12) {
            let cfg = PlanConfig { n_folds: folds, fold_train_years: fy, final_train_years: 30, gap_days: 28 };
            let plan = make_split_plan((year, month), Date::ymd(1970, 1, 1), Cadence::weekly(Date::ymd(2000, 1, 1).add_days(anchor_off)), &cfg).unwrap();
            prop_assert!(plan.check_leakage().is_ok());
            for f in &plan.folds {
                prop_assert!(f.validation.iter().all(|d| d.month() == month));
            }
        }
    }
}
