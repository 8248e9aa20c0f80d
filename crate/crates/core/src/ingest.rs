//! Gridded fields and climate-index series: on-disk formats, spatial
//! regridding and temporal interpolation to a uniform daily store.
//!
//! A field on disk is a JSON manifest next to a binary payload of
//! little-endian `f32` values, date-major then row-major cells. `NaN`
//! payload entries are missing values.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timegrid::{Date, DateRange, LatLonGrid};

/// One climate variable on a lat/lon grid over a contiguous daily range.
#[derive(Clone, Debug, PartialEq)]
pub struct GriddedField {
    pub name: String,
    pub units: String,
    pub grid: LatLonGrid,
    pub start: Date,
    /// `n_dates x n_cells`; `NaN` wherever `missing` is set.
    values: Array2<f64>,
    missing: Array2<bool>,
}

impl GriddedField {
    /// Builds a field from raw values; non-finite entries become missing.
    pub fn from_values(name: &str, units: &str, grid: LatLonGrid, start: Date, values: Array2<f64>) -> Result<Self> {
        if values.ncols() != grid.n_cells() {
            return Err(Error::Dimension(format!(
                "field {name}: {} columns for {} grid cells",
                values.ncols(),
                grid.n_cells()
            )));
        }
        let missing = values.mapv(|v| !v.is_finite());
        let values = values.mapv(|v| if v.is_finite() { v } else { f64::NAN });
        Ok(Self { name: name.to_string(), units: units.to_string(), grid, start, values, missing })
    }

    pub fn n_dates(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cells(&self) -> usize {
        self.values.ncols()
    }

    pub fn dates(&self) -> DateRange {
        DateRange::from_len(self.start, self.n_dates())
    }

    pub fn date_index(&self, d: Date) -> Option<usize> {
        let k = d.days_since(self.start);
        (k >= 0 && (k as usize) < self.n_dates()).then_some(k as usize)
    }

    pub fn date_at(&self, index: usize) -> Date {
        self.start.add_days(index as i64)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn missing(&self) -> &Array2<bool> {
        &self.missing
    }

    pub fn value(&self, date_index: usize, cell: usize) -> Option<f64> {
        (!self.missing[[date_index, cell]]).then(|| self.values[[date_index, cell]])
    }

    pub fn snapshot(&self, date_index: usize) -> ArrayView1<'_, f64> {
        self.values.row(date_index)
    }

    pub fn is_missing(&self, date_index: usize, cell: usize) -> bool {
        self.missing[[date_index, cell]]
    }

    /// Sub-field covering `range` (must lie inside the field's dates).
    pub fn slice_dates(&self, range: DateRange) -> Result<Self> {
        let (Some(a), Some(_)) = (self.date_index(range.start), range.last().and_then(|d| self.date_index(d))) else {
            return Err(Error::OutOfRange {
                date: range.start.to_string(),
                context: format!("slice of field {}", self.name),
            });
        };
        let b = a + range.len();
        Ok(Self {
            name: self.name.clone(),
            units: self.units.clone(),
            grid: self.grid.clone(),
            start: range.start,
            values: self.values.slice(ndarray::s![a..b, ..]).to_owned(),
            missing: self.missing.slice(ndarray::s![a..b, ..]).to_owned(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    pub lat_start: f64,
    pub lat_step: f64,
    pub n_lat: usize,
    pub lon_start: f64,
    pub lon_step: f64,
    pub n_lon: usize,
}

impl From<&LatLonGrid> for GridSpec {
    fn from(g: &LatLonGrid) -> Self {
        Self {
            lat_start: g.lat_start,
            lat_step: g.lat_step,
            n_lat: g.n_lat,
            lon_start: g.lon_start,
            lon_step: g.lon_step,
            n_lon: g.n_lon,
        }
    }
}

impl GridSpec {
    pub fn to_grid(&self) -> Result<LatLonGrid> {
        LatLonGrid::new(self.lat_start, self.lat_step, self.n_lat, self.lon_start, self.lon_step, self.n_lon)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FieldManifest {
    pub name: String,
    pub units: String,
    pub grid: GridSpec,
    pub date_start: Date,
    pub n_dates: usize,
    /// Payload path relative to the manifest's directory.
    pub payload: String,
}

fn payload_path(manifest_path: &Path, payload: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(payload)
}

pub fn decode_f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn encode_f32_le(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn read_field(manifest_path: &Path) -> Result<GriddedField> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: FieldManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest { path: manifest_path.to_path_buf(), message: e.to_string() })?;
    let grid = manifest.grid.to_grid()?;
    let path = payload_path(manifest_path, &manifest.payload);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = manifest.n_dates * grid.n_cells();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::PayloadLength { expected, found: bytes.len() / 4 });
    }
    let raw = decode_f32_le(&bytes);
    let values = Array2::from_shape_vec((manifest.n_dates, grid.n_cells()), raw.into_iter().map(f64::from).collect())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    GriddedField::from_values(&manifest.name, &manifest.units, grid, manifest.date_start, values)
}

/// Writes `<stem>.json` plus `<stem>.bin` next to it.
pub fn write_field(field: &GriddedField, manifest_path: &Path) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("bad manifest path {}", manifest_path.display())))?;
    let payload = format!("{stem}.bin");
    let manifest = FieldManifest {
        name: field.name.clone(),
        units: field.units.clone(),
        grid: GridSpec::from(&field.grid),
        date_start: field.start,
        n_dates: field.n_dates(),
        payload: payload.clone(),
    };
    let bytes = encode_f32_le(
        field
            .values
            .iter()
            .zip(field.missing.iter())
            .map(|(&v, &m)| if m { f32::NAN } else { v as f32 }),
    );
    let bin = payload_path(manifest_path, &payload);
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

/// A scalar climate index on a contiguous daily range.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexSeries {
    pub name: String,
    pub start: Date,
    pub values: Vec<f64>,
}

impl IndexSeries {
    pub fn dates(&self) -> DateRange {
        DateRange::from_len(self.start, self.values.len())
    }

    pub fn get(&self, d: Date) -> Option<f64> {
        let k = d.days_since(self.start);
        (k >= 0).then(|| self.values.get(k as usize).copied()).flatten()
    }
}

/// Irregularly spaced index observations as read from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexObservations {
    pub name: String,
    pub points: Vec<(Date, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRecord {
    date: Date,
    value: f64,
}

pub fn read_index_csv(path: &Path, name: &str) -> Result<IndexObservations> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut points = Vec::new();
    for rec in reader.deserialize() {
        let rec: IndexRecord = rec?;
        if !rec.value.is_finite() {
            return Err(Error::NonFinite(format!("index {name} at {}", rec.date)));
        }
        points.push((rec.date, rec.value));
    }
    Ok(IndexObservations { name: name.to_string(), points })
}

pub fn write_index_csv(path: &Path, series: &IndexSeries) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for (d, &value) in series.dates().iter().zip(&series.values) {
        writer.serialize(IndexRecord { date: d, value })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Linear interpolation of sparse observations onto every day of `range`,
/// holding the end values constant outside the observed span.
pub fn interp_daily(obs: &IndexObservations, range: DateRange) -> Result<IndexSeries> {
    if obs.points.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "index {} needs at least 2 observations, found {}",
            obs.name,
            obs.points.len()
        )));
    }
    let mut pts = obs.points.clone();
    pts.sort_by_key(|p| p.0);
    if pts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidInput(format!("index {} has duplicate dates", obs.name)));
    }
    let mut values = Vec::with_capacity(range.len());
    let mut seg = 0usize;
    for d in range.iter() {
        let v = if d <= pts[0].0 {
            pts[0].1
        } else if d >= pts[pts.len() - 1].0 {
            pts[pts.len() - 1].1
        } else {
            while pts[seg + 1].0 < d {
                seg += 1;
            }
            let (d0, v0) = pts[seg];
            let (d1, v1) = pts[seg + 1];
            if d == d1 {
                v1
            } else {
                let span = d1.days_since(d0) as f64;
                v0 + (v1 - v0) * d.days_since(d0) as f64 / span
            }
        };
        values.push(v);
    }
    Ok(IndexSeries { name: obs.name.clone(), start: range.start, values })
}

const HULL_EPS: f64 = 1e-9;

/// Fractional source index of `x` along an axis, with the lower bracketing
/// node and weight of the upper node. `None` when outside the node span.
fn bracket(x: f64, start: f64, step: f64, n: usize) -> Option<(usize, f64)> {
    let f = (x - start) / step;
    let top = (n - 1) as f64;
    if f < -HULL_EPS || f > top + HULL_EPS {
        return None;
    }
    let f = f.clamp(0.0, top);
    if n == 1 {
        return Some((0, 0.0));
    }
    let i0 = (f.floor() as usize).min(n - 2);
    let w = f - i0 as f64;
    Some((i0, if w.abs() < HULL_EPS { 0.0 } else if (1.0 - w).abs() < HULL_EPS { 1.0 } else { w }))
}

/// Bilinear interpolation of `f` onto the centres of `target`. Targets
/// outside the source hull, or touching a missing source node with nonzero
/// weight, are missing.
pub fn regrid_bilinear(f: &GriddedField, target: &LatLonGrid) -> Result<GriddedField> {
    let src = &f.grid;
    let mut out = Array2::from_elem((f.n_dates(), target.n_cells()), f64::NAN);
    for cell in 0..target.n_cells() {
        let (lat, lon) = target.center(cell);
        let (Some((r0, wr)), Some((c0, wc))) = (
            bracket(lat, src.lat_start, src.lat_step, src.n_lat),
            bracket(lon, src.lon_start, src.lon_step, src.n_lon),
        ) else {
            continue;
        };
        let r1 = (r0 + 1).min(src.n_lat - 1);
        let c1 = (c0 + 1).min(src.n_lon - 1);
        let corners = [
            (src.index_of((r0, c0).into()), (1.0 - wr) * (1.0 - wc)),
            (src.index_of((r0, c1).into()), (1.0 - wr) * wc),
            (src.index_of((r1, c0).into()), wr * (1.0 - wc)),
            (src.index_of((r1, c1).into()), wr * wc),
        ];
        for t in 0..f.n_dates() {
            let mut acc = 0.0;
            let mut ok = true;
            for &(idx, w) in &corners {
                if w == 0.0 {
                    continue;
                }
                match f.value(t, idx) {
                    Some(v) => acc += w * v,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                out[[t, cell]] = acc;
            }
        }
    }
    GriddedField::from_values(&f.name, &f.units, target.clone(), f.start, out)
}

impl From<(usize, usize)> for crate::timegrid::CellIndex {
    fn from((row, col): (usize, usize)) -> Self {
        Self { row, col }
    }
}

fn integer_ratio(coarse: f64, fine: f64) -> Option<usize> {
    let r = coarse / fine;
    let k = r.round();
    ((r - k).abs() < 1e-9 && k >= 1.0).then_some(k as usize)
}

/// Block mean onto a coarser grid whose cells are aligned groups of source
/// cells (4x4 for 0.5 to 2 degrees). Missing only if the whole block is missing.
pub fn coarsen_mean(f: &GriddedField, target: &LatLonGrid) -> Result<GriddedField> {
    let src = &f.grid;
    let misaligned = || Error::GridMismatch(format!("target grid is not an aligned coarsening of the {} grid", f.name));
    let kr = integer_ratio(target.lat_step, src.lat_step).ok_or_else(misaligned)?;
    let kc = integer_ratio(target.lon_step, src.lon_step).ok_or_else(misaligned)?;
    // block (r, c) covers source rows r*kr + off_r .. + kr
    let off = |t_start: f64, s_start: f64, s_step: f64, k: usize| -> Option<usize> {
        let first_centre = t_start - (k as f64 - 1.0) / 2.0 * s_step;
        let o = (first_centre - s_start) / s_step;
        let oi = o.round();
        ((o - oi).abs() < 1e-6 && oi >= 0.0).then_some(oi as usize)
    };
    let off_r = off(target.lat_start, src.lat_start, src.lat_step, kr).ok_or_else(misaligned)?;
    let off_c = off(target.lon_start, src.lon_start, src.lon_step, kc).ok_or_else(misaligned)?;
    if off_r + target.n_lat * kr > src.n_lat || off_c + target.n_lon * kc > src.n_lon {
        return Err(misaligned());
    }
    let mut out = Array2::from_elem((f.n_dates(), target.n_cells()), f64::NAN);
    for cell in 0..target.n_cells() {
        let tc = target.cell_of(cell);
        let members: Vec<usize> = (0..kr)
            .flat_map(|i| (0..kc).map(move |j| (i, j)))
            .map(|(i, j)| src.index_of((off_r + tc.row * kr + i, off_c + tc.col * kc + j).into()))
            .collect();
        for t in 0..f.n_dates() {
            let (sum, n) = members
                .iter()
                .filter_map(|&m| f.value(t, m))
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n > 0 {
                out[[t, cell]] = sum / n as f64;
            }
        }
    }
    GriddedField::from_values(&f.name, &f.units, target.clone(), f.start, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n_lat: usize, n_lon: usize, step: f64) -> LatLonGrid {
        LatLonGrid::new(30.0, step, n_lat, -110.0, step, n_lon).unwrap()
    }

    #[test]
    fn read_field_shape_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(2, 2, 1.0);
        let mut vals: Vec<f64> = (0..12).map(|v| v as f64).collect();
        vals[5] = f64::NAN;
        let field = GriddedField::from_values(
            "tmp2m",
            "K",
            g,
            Date::ymd(2010, 1, 1),
            Array2::from_shape_vec((3, 4), vals).unwrap(),
        )
        .unwrap();
        let path = dir.path().join("tmp2m.json");
        write_field(&field, &path).unwrap();
        let back = read_field(&path).unwrap();
        assert_eq!(back.values().len(), 12);
        assert!(back.is_missing(1, 1));
        assert_eq!(back.value(2, 3), Some(11.0));
        // bit-exact payload round trip
        let first = fs::read(dir.path().join("tmp2m.bin")).unwrap();
        let path2 = dir.path().join("copy.json");
        write_field(&back, &path2).unwrap();
        assert_eq!(first, fs::read(dir.path().join("copy.bin")).unwrap());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(2, 2, 1.0);
        let field =
            GriddedField::from_values("sm", "m", g, Date::ymd(2010, 1, 1), Array2::zeros((3, 4))).unwrap();
        let path = dir.path().join("sm.json");
        write_field(&field, &path).unwrap();
        let bin = dir.path().join("sm.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_field(&path).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn bad_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        fs::write(&path, "{\"name\": 3}").unwrap();
        assert!(matches!(read_field(&path), Err(Error::Manifest { .. })));
    }

    fn obs(points: &[(i64, f64)]) -> IndexObservations {
        let d0 = Date::ymd(2000, 1, 1);
        IndexObservations { name: "mei".into(), points: points.iter().map(|&(k, v)| (d0.add_days(k), v)).collect() }
    }

    #[test]
    fn interp_linear_and_constant() {
        let d0 = Date::ymd(2000, 1, 1);
        let s = interp_daily(&obs(&[(0, 0.0), (10, 10.0)]), DateRange::from_len(d0, 11)).unwrap();
        assert_eq!(s.values[5], 5.0);
        let c = interp_daily(&obs(&[(0, 2.5), (7, 2.5), (14, 2.5)]), DateRange::from_len(d0, 20)).unwrap();
        assert!(c.values.iter().all(|&v| v == 2.5));
        // bimonthly knots 61 days apart
        let m = interp_daily(&obs(&[(0, 1.0), (61, 3.0)]), DateRange::from_len(d0, 62)).unwrap();
        assert!((m.values[30] - (1.0 + 30.0 * 2.0 / 61.0)).abs() < 1e-12);
        // constant extrapolation outside knots
        let e = interp_daily(&obs(&[(5, 1.0), (9, 3.0)]), DateRange::from_len(d0, 15)).unwrap();
        assert_eq!(e.values[0], 1.0);
        assert_eq!(e.values[14], 3.0);
    }

    #[test]
    fn interp_needs_two_points() {
        let d0 = Date::ymd(2000, 1, 1);
        assert!(interp_daily(&obs(&[(0, 1.0)]), DateRange::from_len(d0, 3)).is_err());
    }

    #[test]
    fn index_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nao.csv");
        let s = IndexSeries { name: "nao".into(), start: Date::ymd(2001, 3, 4), values: vec![0.5, -1.25, 3.0] };
        write_index_csv(&path, &s).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("date,value\n2001-03-04,0.5"));
        let o = read_index_csv(&path, "nao").unwrap();
        let back = interp_daily(&o, s.dates()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bilinear_examples() {
        let src = grid(2, 2, 1.0);
        let vals = Array2::from_shape_vec((1, 4), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let f = GriddedField::from_values("v", "u", src.clone(), Date::ymd(2000, 1, 1), vals).unwrap();
        let mid = LatLonGrid::new(30.5, 1.0, 1, -109.5, 1.0, 1).unwrap();
        assert!((regrid_bilinear(&f, &mid).unwrap().value(0, 0).unwrap() - 1.5).abs() < 1e-12);
        // coincident node
        let node = LatLonGrid::new(31.0, 1.0, 1, -110.0, 1.0, 1).unwrap();
        assert_eq!(regrid_bilinear(&f, &node).unwrap().value(0, 0), Some(2.0));
        // outside hull
        let out = LatLonGrid::new(40.0, 1.0, 1, -110.0, 1.0, 1).unwrap();
        assert_eq!(regrid_bilinear(&f, &out).unwrap().value(0, 0), None);
    }

    #[test]
    fn bilinear_missing_corner_propagates() {
        let src = grid(2, 2, 1.0);
        let vals = Array2::from_shape_vec((1, 4), vec![0.0, f64::NAN, 2.0, 3.0]).unwrap();
        let f = GriddedField::from_values("v", "u", src, Date::ymd(2000, 1, 1), vals).unwrap();
        let mid = LatLonGrid::new(30.5, 1.0, 1, -109.5, 1.0, 1).unwrap();
        assert_eq!(regrid_bilinear(&f, &mid).unwrap().value(0, 0), None);
    }

    #[test]
    fn coarsen_examples() {
        let src = LatLonGrid::new(25.25, 0.5, 4, -100.75, 0.5, 4).unwrap();
        let target = LatLonGrid::new(26.0, 2.0, 1, -100.0, 2.0, 1).unwrap();
        let ramp = Array2::from_shape_vec((1, 16), (1..=16).map(f64::from).collect()).unwrap();
        let f = GriddedField::from_values("v", "u", src.clone(), Date::ymd(2000, 1, 1), ramp).unwrap();
        assert_eq!(coarsen_mean(&f, &target).unwrap().value(0, 0), Some(8.5));
        let mut one = vec![f64::NAN; 16];
        one[7] = 4.25;
        let f = GriddedField::from_values("v", "u", src.clone(), Date::ymd(2000, 1, 1), Array2::from_shape_vec((1, 16), one).unwrap()).unwrap();
        assert_eq!(coarsen_mean(&f, &target).unwrap().value(0, 0), Some(4.25));
        let f = GriddedField::from_values("v", "u", src.clone(), Date::ymd(2000, 1, 1), Array2::from_elem((1, 16), 7.0)).unwrap();
        assert_eq!(coarsen_mean(&f, &target).unwrap().value(0, 0), Some(7.0));
        let bad = LatLonGrid::new(26.3, 2.0, 1, -100.0, 2.0, 1).unwrap();
        assert!(matches!(coarsen_mean(&f, &bad), Err(Error::GridMismatch(_))));
    }

    proptest! {
        #[test]
        fn regrid_and_coarsen_exact_on_affine(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -50.0f64..50.0) {
            let src = LatLonGrid::new(25.25, 0.5, 8, -100.75, 0.5, 8).unwrap();
            let affine = |i: usize| { let (lat, lon) = src.center(i); a * lat + b * lon + c };
            let vals = Array2::from_shape_fn((2, 64), |(_, i)| affine(i));
            let f = GriddedField::from_values("v", "u", src.clone(), Date::ymd(2000, 1, 1), vals).unwrap();
            let target = LatLonGrid::new(25.6, 0.7, 5, -100.3, 0.9, 4).unwrap();
            let r = regrid_bilinear(&f, &target).unwrap();
            for i in 0..target.n_cells() {
                let (lat, lon) = target.center(i);
                prop_assert!((r.value(1, i).unwrap() - (a * lat + b * lon + c)).abs() < 1e-9);
            }
            let coarse = LatLonGrid::new(26.0, 2.0, 2, -100.0, 2.0, 2).unwrap();
            let k = coarsen_mean(&f, &coarse).unwrap();
            for i in 0..coarse.n_cells() {
                let (lat, lon) = coarse.center(i);
                prop_assert!((k.value(0, i).unwrap() - (a * lat + b * lon + c)).abs() < 1e-9);
            }
        }

        #[test]
        fn interp_passes_through_knots(vals in proptest::collection::vec(-10.0f64..10.0, 2..12), gap in 1i64..40) {
            let d0 = Date::ymd(2005, 6, 1);
            let o = IndexObservations { name: "x".into(), points: vals.iter().enumerate().map(|(i, &v)| (d0.add_days(i as i64 * gap), v)).collect() };
            let s = interp_daily(&o, DateRange::from_len(d0, (vals.len() as i64 * gap) as usize)).unwrap();
            for (d, v) in &o.points {
                prop_assert_eq!(s.get(*d).unwrap().to_bits(), v.to_bits());
            }
        }
    }
}
