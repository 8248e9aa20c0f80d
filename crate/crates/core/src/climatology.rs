//! Day-of-year climatologies, z-scoring, and the two-week target and
//! recent-anomaly series built on top of them.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{read_field, write_field, GriddedField};
use crate::timegrid::{Date, DateRange, LatLonGrid, DAYS_PER_YEAR};

pub const STD_FLOOR: f64 = 1e-6;

/// First and last day (inclusive) of the week 3-4 window, relative to the forecast date.
pub const TARGET_WINDOW: (i64, i64) = (15, 28);
/// Week -2 and -1, relative to the forecast date.
pub const RECENT_WINDOW: (i64, i64) = (-14, -1);
/// Days after a forecast date whose observations its target depends on.
pub const TARGET_HORIZON: i64 = TARGET_WINDOW.1;

/// Per-cell, per-day-of-year mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    pub grid: LatLonGrid,
    pub ref_years: (i32, i32),
    pub pool_window: u32,
    pub std_floor: f64,
    /// `365 x n_cells`, row `k` holds day-of-year `k + 1`.
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

fn circular_doy(doy: i64) -> usize {
    ((doy - 1).rem_euclid(DAYS_PER_YEAR as i64)) as usize
}

impl Climatology {
    pub fn mean_at(&self, doy: u32, cell: usize) -> f64 {
        self.mean[[doy as usize - 1, cell]]
    }

    pub fn std_at(&self, doy: u32, cell: usize) -> f64 {
        self.std[[doy as usize - 1, cell]]
    }
}

/// Fits mean and sample standard deviation per (cell, day-of-year) over all
/// reference-year samples whose day of year lies within `pool_window` days
/// (circularly) of the key.
pub fn fit_climatology(f: &GriddedField, ref_years: (i32, i32), pool_window: u32) -> Result<Climatology> {
    fit_climatology_with_floor(f, ref_years, pool_window, STD_FLOOR)
}

pub fn fit_climatology_with_floor(
    f: &GriddedField,
    ref_years: (i32, i32),
    pool_window: u32,
    std_floor: f64,
) -> Result<Climatology> {
    if ref_years.0 > ref_years.1 {
        return Err(Error::InvalidInput(format!("empty reference years {ref_years:?}")));
    }
    let n_cells = f.n_cells();
    let w = pool_window as i64;
    let in_ref: Vec<(usize, usize)> = f
        .dates()
        .iter()
        .enumerate()
        .filter(|(_, d)| (ref_years.0..=ref_years.1).contains(&d.year()))
        .map(|(t, d)| (t, d.day_of_year() as usize - 1))
        .collect();

    let mut sum = Array2::<f64>::zeros((DAYS_PER_YEAR, n_cells));
    let mut count = Array2::<f64>::zeros((DAYS_PER_YEAR, n_cells));
    for &(t, k) in &in_ref {
        for off in -w..=w {
            let key = circular_doy(k as i64 + 1 + off);
            for c in 0..n_cells {
                if let Some(v) = f.value(t, c) {
                    sum[[key, c]] += v;
                    count[[key, c]] += 1.0;
                }
            }
        }
    }
    if let Some(((k, c), _)) = count.indexed_iter().find(|(_, &n)| n == 0.0) {
        return Err(Error::Empty(format!(
            "no reference samples for cell {c}, day of year {} in {}",
            k + 1,
            f.name
        )));
    }
    let mean = &sum / &count;
    let mut ss = Array2::<f64>::zeros((DAYS_PER_YEAR, n_cells));
    for &(t, k) in &in_ref {
        for off in -w..=w {
            let key = circular_doy(k as i64 + 1 + off);
            for c in 0..n_cells {
                if let Some(v) = f.value(t, c) {
                    let d = v - mean[[key, c]];
                    ss[[key, c]] += d * d;
                }
            }
        }
    }
    let std = ndarray::Zip::from(&ss)
        .and(&count)
        .map_collect(|&s, &n| if n > 1.0 { (s / (n - 1.0)).sqrt().max(std_floor) } else { std_floor });
    Ok(Climatology { grid: f.grid.clone(), ref_years, pool_window, std_floor, mean, std })
}

fn check_grid(f: &GriddedField, c: &Climatology) -> Result<()> {
    if !f.grid.same_geometry(&c.grid) {
        return Err(Error::GridMismatch(format!("field {} and its climatology use different grids", f.name)));
    }
    Ok(())
}

pub fn zscore(f: &GriddedField, c: &Climatology) -> Result<GriddedField> {
    check_grid(f, c)?;
    let mut out = f.values().clone();
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let doy = f.date_at(t).day_of_year();
        for (cell, v) in row.iter_mut().enumerate() {
            *v = (*v - c.mean_at(doy, cell)) / c.std_at(doy, cell);
        }
    }
    GriddedField::from_values(&f.name, "z", f.grid.clone(), f.start, out)
}

pub fn unzscore(z: &GriddedField, c: &Climatology, units: &str) -> Result<GriddedField> {
    check_grid(z, c)?;
    let mut out = z.values().clone();
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let doy = z.date_at(t).day_of_year();
        for (cell, v) in row.iter_mut().enumerate() {
            *v = *v * c.std_at(doy, cell) + c.mean_at(doy, cell);
        }
    }
    GriddedField::from_values(&z.name, units, z.grid.clone(), z.start, out)
}

/// Field whose value at `t` is the mean of `f` over `t+from ..= t+to`, for
/// every `t` in `f`'s range whose window also lies inside it. A window with
/// no observed values is missing.
pub fn window_mean(f: &GriddedField, from: i64, to: i64) -> Result<GriddedField> {
    assert!(from <= to);
    let n = f.n_dates() as i64;
    let first = (-from).max(0);
    let last = (n - 1 - to).min(n - 1);
    if last < first {
        return Err(Error::InsufficientHistory(format!(
            "field {} has {} dates, too short for window [{from}, {to}]",
            f.name, n
        )));
    }
    let n_out = (last - first + 1) as usize;
    let mut out = Array2::from_elem((n_out, f.n_cells()), f64::NAN);
    for i in 0..n_out {
        let t = first + i as i64;
        for c in 0..f.n_cells() {
            let (s, k) = ((t + from)..=(t + to))
                .filter_map(|u| f.value(u as usize, c))
                .fold((0.0, 0usize), |(s, k), v| (s + v, k + 1));
            if k > 0 {
                out[[i, c]] = s / k as f64;
            }
        }
    }
    GriddedField::from_values(&f.name, &f.units, f.grid.clone(), f.date_at(first as usize), out)
}

/// Climatology of the week 3-4 mean keyed by the forecast date's day of year.
pub fn fit_two_week_climatology(tmp2m: &GriddedField, ref_years: (i32, i32), pool_window: u32) -> Result<Climatology> {
    let agg = window_mean(tmp2m, TARGET_WINDOW.0, TARGET_WINDOW.1)?;
    fit_climatology(&agg, ref_years, pool_window)
}

/// Per-target-cell daily series on a contiguous date range.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSeries {
    pub start: Date,
    /// Flat grid indices of the columns.
    pub cells: Vec<usize>,
    /// `n_dates x G`.
    pub values: Array2<f64>,
}

impl TargetSeries {
    pub fn dates(&self) -> DateRange {
        DateRange::from_len(self.start, self.values.nrows())
    }

    pub fn index_of(&self, d: Date) -> Option<usize> {
        let k = d.days_since(self.start);
        (k >= 0 && (k as usize) < self.values.nrows()).then_some(k as usize)
    }

    pub fn row(&self, d: Date) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index_of(d).map(|i| self.values.row(i))
    }

    pub fn n_cells(&self) -> usize {
        self.values.ncols()
    }
}

fn windowed_anomaly(tmp2m: &GriddedField, c14: &Climatology, window: (i64, i64), what: &str) -> Result<TargetSeries> {
    check_grid(tmp2m, c14)?;
    let agg = window_mean(tmp2m, window.0, window.1)?;
    let cells = tmp2m.grid.target_cells();
    let mut values = Array2::zeros((agg.n_dates(), cells.len()));
    for t in 0..agg.n_dates() {
        let doy = agg.date_at(t).day_of_year();
        for (j, &c) in cells.iter().enumerate() {
            let v = agg.value(t, c).ok_or_else(|| {
                Error::NonFinite(format!("{what}: no observations in window at {} cell {c}", agg.date_at(t)))
            })?;
            values[[t, j]] = (v - c14.mean_at(doy, c)) / c14.std_at(doy, c);
        }
    }
    Ok(TargetSeries { start: agg.start, cells, values })
}

/// `y[g, t]`: z-score of the mean temperature over `t+15 ..= t+28`.
pub fn two_week_target(tmp2m: &GriddedField, c14: &Climatology) -> Result<TargetSeries> {
    windowed_anomaly(tmp2m, c14, TARGET_WINDOW, "two-week target")
}

/// Anomaly of the mean over `t-14 ..= t-1`, keyed by `t`'s day of year.
pub fn recent_anomaly(tmp2m: &GriddedField, c14: &Climatology) -> Result<TargetSeries> {
    windowed_anomaly(tmp2m, c14, RECENT_WINDOW, "recent anomaly")
}

#[derive(Serialize, Deserialize)]
struct ClimatologyMeta {
    ref_years: (i32, i32),
    pool_window: u32,
    std_floor: f64,
    mean: String,
    std: String,
}

/// Pseudo-date anchoring the 365 day-of-year rows of a persisted climatology.
fn pseudo_start() -> Date {
    Date::ymd(2001, 1, 1)
}

/// Persists as `<stem>.json` metadata plus `<stem>_mean` / `<stem>_std` fields.
pub fn write_climatology(c: &Climatology, name: &str, manifest_path: &Path) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("climatology");
    let mean_name = format!("{stem}_mean.json");
    let std_name = format!("{stem}_std.json");
    write_field(&GriddedField::from_values(name, "mean", c.grid.clone(), pseudo_start(), c.mean.clone())?, &dir.join(&mean_name))?;
    write_field(&GriddedField::from_values(name, "std", c.grid.clone(), pseudo_start(), c.std.clone())?, &dir.join(&std_name))?;
    let meta = ClimatologyMeta { ref_years: c.ref_years, pool_window: c.pool_window, std_floor: c.std_floor, mean: mean_name, std: std_name };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(manifest_path, e))
}

pub fn read_climatology(manifest_path: &Path) -> Result<Climatology> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let meta: ClimatologyMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest { path: manifest_path.to_path_buf(), message: e.to_string() })?;
    let mean = read_field(&dir.join(&meta.mean))?;
    let std = read_field(&dir.join(&meta.std))?;
    if mean.n_dates() != DAYS_PER_YEAR || std.n_dates() != DAYS_PER_YEAR {
        return Err(Error::Dimension("climatology tables must have 365 rows".into()));
    }
    Ok(Climatology {
        grid: mean.grid.clone(),
        ref_years: meta.ref_years,
        pool_window: meta.pool_window,
        std_floor: meta.std_floor,
        mean: mean.values().clone(),
        std: std.values().clone(),
    })
}
