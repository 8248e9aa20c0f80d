//! Calendar arithmetic and lat/lon grid indexing.
//!
//! Day-of-year logic folds Feb 29 onto Feb 28 so that every year maps onto
//! exactly 365 day-of-year keys.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: usize = 365;

/// A proleptic Gregorian calendar date.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Date(NaiveDate);

impl Date {
    pub fn new(year: i32, month: u32, day: u32) -> Result<Self> {
        NaiveDate::from_ymd_opt(year, month, day)
            .map(Date)
            .ok_or_else(|| Error::InvalidInput(format!("invalid date {year:04}-{month:02}-{day:02}")))
    }

    /// Panicking constructor for literals known to be valid.
    pub fn ymd(year: i32, month: u32, day: u32) -> Self {
        Self::new(year, month, day).expect("valid calendar date")
    }

    pub fn year(self) -> i32 {
        self.0.year()
    }

    pub fn month(self) -> u32 {
        self.0.month()
    }

    pub fn day(self) -> u32 {
        self.0.day()
    }

    /// Day of year in `1..=365`; Feb 29 shares Feb 28's key and later days in
    /// leap years map to their non-leap equivalents.
    pub fn day_of_year(self) -> u32 {
        let ordinal = self.0.ordinal();
        if is_leap_year(self.year()) && ordinal >= 60 {
            ordinal - 1
        } else {
            ordinal
        }
    }

    pub fn add_days(self, k: i64) -> Self {
        Date(self.0 + Duration::days(k))
    }

    /// Signed day count `self - other`.
    pub fn days_since(self, other: Date) -> i64 {
        (self.0 - other.0).num_days()
    }

    /// The date in `year` with the same day of year; Feb 29 becomes Feb 28
    /// when `year` is not a leap year.
    pub fn same_doy_in_year(self, year: i32) -> Self {
        let (m, d) = (self.month(), self.day());
        if m == 2 && d == 29 && !is_leap_year(year) {
            Date::ymd(year, 2, 28)
        } else {
            Date::ymd(year, m, d)
        }
    }

    /// Same calendar day shifted by a number of years, Feb 29 folding to Feb 28.
    pub fn add_years(self, years: i32) -> Self {
        self.same_doy_in_year(self.year() + years)
    }

    pub fn first_of_month(self) -> Self {
        Date::ymd(self.year(), self.month(), 1)
    }
}

pub fn is_leap_year(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

pub fn days_in_month(year: i32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap_year(year) => 29,
        2 => 28,
        _ => panic!("month out of range: {month}"),
    }
}

impl fmt::Display for Date {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format("%Y-%m-%d"))
    }
}

impl fmt::Debug for Date {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Date {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
            .map(Date)
            .map_err(|e| Error::InvalidInput(format!("bad date {s:?}: {e}")))
    }
}

impl Serialize for Date {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Date {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Half-open date interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: Date,
    pub end: Date,
}

impl DateRange {
    pub fn new(start: Date, end: Date) -> Self {
        Self { start, end }
    }

    /// Range covering `n` consecutive days from `start`.
    pub fn from_len(start: Date, n: usize) -> Self {
        Self { start, end: start.add_days(n as i64) }
    }

    pub fn len(&self) -> usize {
        self.end.days_since(self.start).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, d: Date) -> bool {
        d >= self.start && d < self.end
    }

    /// Last date inside the range.
    pub fn last(&self) -> Option<Date> {
        (!self.is_empty()).then(|| self.end.add_days(-1))
    }

    pub fn iter(&self) -> impl Iterator<Item = Date> + '_ {
        let start = self.start;
        (0..self.len() as i64).map(move |k| start.add_days(k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

/// Regular lat/lon grid with cell centres at `lat_start + row * lat_step` and
/// `lon_start + col * lon_step`. Cells are enumerated row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLonGrid {
    pub lat_start: f64,
    pub lat_step: f64,
    pub n_lat: usize,
    pub lon_start: f64,
    pub lon_step: f64,
    pub n_lon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub land_mask: Option<Vec<bool>>,
}

impl LatLonGrid {
    pub fn new(lat_start: f64, lat_step: f64, n_lat: usize, lon_start: f64, lon_step: f64, n_lon: usize) -> Result<Self> {
        let grid = Self { lat_start, lat_step, n_lat, lon_start, lon_step, n_lon, land_mask: None };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat_step > 0.0 && self.lon_step > 0.0) {
            return Err(Error::InvalidInput("grid steps must be positive".into()));
        }
        if self.n_lat == 0 || self.n_lon == 0 {
            return Err(Error::InvalidInput("grid must have at least one cell".into()));
        }
        let lat_end = self.lat(self.n_lat - 1);
        if self.lat_start < -90.0 || lat_end > 90.0 {
            return Err(Error::InvalidInput(format!(
                "latitudes [{}, {lat_end}] outside [-90, 90]",
                self.lat_start
            )));
        }
        if let Some(mask) = &self.land_mask {
            if mask.len() != self.n_cells() {
                return Err(Error::Dimension(format!(
                    "land mask has {} entries for {} cells",
                    mask.len(),
                    self.n_cells()
                )));
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn lat(&self, row: usize) -> f64 {
        self.lat_start + row as f64 * self.lat_step
    }

    pub fn lon(&self, col: usize) -> f64 {
        self.lon_start + col as f64 * self.lon_step
    }

    pub fn index_of(&self, c: CellIndex) -> usize {
        debug_assert!(c.row < self.n_lat && c.col < self.n_lon);
        c.row * self.n_lon + c.col
    }

    pub fn cell_of(&self, index: usize) -> CellIndex {
        debug_assert!(index < self.n_cells());
        CellIndex { row: index / self.n_lon, col: index % self.n_lon }
    }

    pub fn center(&self, index: usize) -> (f64, f64) {
        let c = self.cell_of(index);
        (self.lat(c.row), self.lon(c.col))
    }

    /// Flat indices of target cells: masked cells when a land mask is set, otherwise all.
    pub fn target_cells(&self) -> Vec<usize> {
        match &self.land_mask {
            Some(mask) => mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect(),
            None => (0..self.n_cells()).collect(),
        }
    }

    /// Geometry equality, ignoring the land mask.
    pub fn same_geometry(&self, other: &LatLonGrid) -> bool {
        const EPS: f64 = 1e-9;
        self.n_lat == other.n_lat
            && self.n_lon == other.n_lon
            && (self.lat_start - other.lat_start).abs() < EPS
            && (self.lat_step - other.lat_step).abs() < EPS
            && (self.lon_start - other.lon_start).abs() < EPS
            && (self.lon_step - other.lon_step).abs() < EPS
    }

    /// Cell whose centre lies within half a step of `(lat, lon)`.
    pub fn locate(&self, lat: f64, lon: f64) -> Option<CellIndex> {
        let r = ((lat - self.lat_start) / self.lat_step).round();
        let c = ((lon - self.lon_start) / self.lon_step).round();
        if r < 0.0 || c < 0.0 || r as usize >= self.n_lat || c as usize >= self.n_lon {
            return None;
        }
        let (row, col) = (r as usize, c as usize);
        let close = (self.lat(row) - lat).abs() <= self.lat_step / 2.0 + 1e-9
            && (self.lon(col) - lon).abs() <= self.lon_step / 2.0 + 1e-9;
        close.then_some(CellIndex { row, col })
    }

    pub fn with_land_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.land_mask = Some(mask);
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskRecord {
    lat: f64,
    lon: f64,
    is_target: u8,
}

/// Reads a `lat,lon,is_target` CSV and attaches it to `grid`. Cells absent
/// from the file are not targets.
pub fn read_land_mask(path: &Path, grid: &LatLonGrid) -> Result<LatLonGrid> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut mask = vec![false; grid.n_cells()];
    for record in reader.deserialize() {
        let rec: MaskRecord = record?;
        let cell = grid.locate(rec.lat, rec.lon).ok_or_else(|| {
            Error::InvalidInput(format!("mask point ({}, {}) is not a grid centre", rec.lat, rec.lon))
        })?;
        mask[grid.index_of(cell)] = rec.is_target != 0;
    }
    grid.clone().with_land_mask(mask)
}

pub fn write_land_mask(path: &Path, grid: &LatLonGrid) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for i in 0..grid.n_cells() {
        let (lat, lon) = grid.center(i);
        let is_target = grid.land_mask.as_ref().is_none_or(|m| m[i]) as u8;
        writer.serialize(MaskRecord { lat, lon, is_target })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn day_of_year_examples() {
        assert_eq!(Date::ymd(2017, 1, 1).day_of_year(), 1);
        assert_eq!(Date::ymd(2016, 2, 29).day_of_year(), 59);
        assert_eq!(Date::ymd(2016, 2, 28).day_of_year(), 59);
        assert_eq!(Date::ymd(2017, 12, 31).day_of_year(), 365);
    }

    #[test]
    fn leap_year_december_31_by_enumeration() {
        // walk the leap year and count distinct folded keys
        let mut d = Date::ymd(2016, 1, 1);
        let mut keys = std::collections::BTreeSet::new();
        while d.year() == 2016 {
            keys.insert(d.day_of_year());
            d = d.add_days(1);
        }
        assert_eq!(keys.len(), 365);
        assert_eq!(Date::ymd(2016, 12, 31).day_of_year(), *keys.iter().max().unwrap());
        assert_eq!(Date::ymd(2016, 12, 31).day_of_year(), 365);
    }

    #[test]
    fn add_days_examples() {
        assert_eq!(Date::ymd(2018, 3, 1).add_days(-28), Date::ymd(2018, 2, 1));
        let d = Date::ymd(2013, 7, 4);
        assert_eq!(d.add_days(0), d);
        assert_eq!(Date::ymd(2016, 2, 28).add_days(1), Date::ymd(2016, 2, 29));
    }

    #[test]
    fn same_doy_examples() {
        assert_eq!(Date::ymd(2018, 3, 1).same_doy_in_year(2016), Date::ymd(2016, 3, 1));
        let d = Date::ymd(2015, 10, 12);
        assert_eq!(d.same_doy_in_year(2015), d);
        assert_eq!(Date::ymd(2016, 2, 29).same_doy_in_year(2017), Date::ymd(2017, 2, 28));
    }

    #[test]
    fn doy_surjective_every_year() {
        for year in [1999, 2000, 2016, 2100] {
            let mut seen = vec![false; 366];
            let mut d = Date::ymd(year, 1, 1);
            while d.year() == year {
                seen[d.day_of_year() as usize] = true;
                d = d.add_days(1);
            }
            assert!(seen[1..].iter().all(|&s| s), "year {year}");
        }
    }

    #[test]
    fn date_parse_and_display() {
        let d: Date = "2016-02-29".parse().unwrap();
        assert_eq!(d.to_string(), "2016-02-29");
        assert!("2017-02-29".parse::<Date>().is_err());
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, "\"2016-02-29\"");
    }

    #[test]
    fn grid_validation() {
        assert!(LatLonGrid::new(25.0, 2.0, 13, -133.0, 2.0, 29).is_ok());
        assert!(LatLonGrid::new(85.0, 2.0, 4, 0.0, 2.0, 4).is_err());
        assert!(LatLonGrid::new(0.0, 0.0, 4, 0.0, 2.0, 4).is_err());
    }

    #[test]
    fn land_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.csv");
        let grid = LatLonGrid::new(25.0, 2.0, 3, -100.0, 2.0, 4).unwrap();
        let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let masked = grid.clone().with_land_mask(mask.clone()).unwrap();
        write_land_mask(&path, &masked).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("lat,lon,is_target"));
        let back = read_land_mask(&path, &grid).unwrap();
        assert_eq!(back.land_mask.as_deref(), Some(mask.as_slice()));
        assert_eq!(back.target_cells(), vec![0, 3, 6, 9]);
    }

    proptest! {
        #[test]
        fn add_days_round_trip(y in 1900i32..2100, doy in 0i64..365, k in -10_000i64..10_000) {
            let d = Date::ymd(y, 1, 1).add_days(doy);
            prop_assert_eq!(d.add_days(k).add_days(-k), d);
            prop_assert_eq!(d.add_days(k).days_since(d), k);
        }

        #[test]
        fn doy_constant_across_years(m in 1u32..=12, day in 1u32..=31, y1 in 1950i32..2050, y2 in 1950i32..2050) {
            prop_assume!(day <= days_in_month(2001, m));
            prop_assert_eq!(Date::ymd(y1, m, day).day_of_year(), Date::ymd(y2, m, day).day_of_year());
        }

        #[test]
        fn cell_index_round_trip(n_lat in 1usize..20, n_lon in 1usize..20, seed in 0usize..400) {
            let grid = LatLonGrid::new(0.0, 1.0, n_lat, 0.0, 1.0, n_lon).unwrap();
            let idx = seed % grid.n_cells();
            prop_assert_eq!(grid.index_of(grid.cell_of(idx)), idx);
        }
    }
}
