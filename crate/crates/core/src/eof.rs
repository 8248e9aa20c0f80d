//! Empirical orthogonal functions: leading spatial patterns of a field's
//! snapshot covariance, and projection of snapshots onto them.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{read_field, write_field, GriddedField};
use crate::timegrid::{Date, LatLonGrid};

pub const DEFAULT_COMPONENTS: usize = 10;
const EIGEN_TOLERANCE: f64 = 1e-10;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct EofBasis {
    pub variable: String,
    pub grid: LatLonGrid,
    pub fit_years: (i32, i32),
    /// Per-cell temporal mean over the fit range (0 for excluded cells).
    pub cell_mean: Array1<f64>,
    /// Cells used in the fit; excluded cells carry zero weight.
    pub active: Vec<bool>,
    /// `n_cells x k`, orthonormal columns.
    pub loadings: Array2<f64>,
    pub explained_variance: Array1<f64>,
}

impl EofBasis {
    pub fn k(&self) -> usize {
        self.loadings.ncols()
    }

    /// `loadings^T (snapshot - cell_mean)`; missing (non-finite) cells count as zero anomaly.
    pub fn project(&self, snapshot: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if snapshot.len() != self.cell_mean.len() {
            return Err(Error::GridMismatch(format!(
                "snapshot has {} cells, basis for {} has {}",
                snapshot.len(),
                self.variable,
                self.cell_mean.len()
            )));
        }
        let anomaly = Array1::from_iter(snapshot.iter().zip(&self.cell_mean).zip(&self.active).map(|((&v, &m), &a)| {
            if a && v.is_finite() {
                v - m
            } else {
                0.0
            }
        }));
        Ok(self.loadings.t().dot(&anomaly))
    }

    /// Projects every date of `f`; returns `n_dates x k`.
    pub fn project_field(&self, f: &GriddedField) -> Result<Array2<f64>> {
        if !f.grid.same_geometry(&self.grid) {
            return Err(Error::GridMismatch(format!("field {} does not match basis grid", f.name)));
        }
        let mut out = Array2::zeros((f.n_dates(), self.k()));
        for t in 0..f.n_dates() {
            out.row_mut(t).assign(&self.project(f.snapshot(t))?);
        }
        Ok(out)
    }

    pub fn reconstruct(&self, coefficients: ArrayView1<'_, f64>) -> Array1<f64> {
        &self.cell_mean + &self.loadings.dot(&coefficients)
    }
}

fn symmetric_eigen(m: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let eig = m
        .try_symmetric_eigen(EIGEN_TOLERANCE, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Fits the leading `k` EOFs of `f` over dates in `fit_years` (inclusive).
/// Cells missing on any fit date are excluded.
pub fn fit_eof(f: &GriddedField, fit_years: (i32, i32), k: usize) -> Result<EofBasis> {
    let rows: Vec<usize> = (0..f.n_dates())
        .filter(|&t| (fit_years.0..=fit_years.1).contains(&f.date_at(t).year()))
        .collect();
    let n = rows.len();
    if n < k || n < 2 {
        return Err(Error::InsufficientHistory(format!(
            "{}: {n} dates in fit years {fit_years:?}, need at least {k}",
            f.name
        )));
    }
    let active: Vec<bool> = (0..f.n_cells()).map(|c| rows.iter().all(|&t| !f.is_missing(t, c))).collect();
    let cols: Vec<usize> = (0..f.n_cells()).filter(|&c| active[c]).collect();
    if cols.is_empty() {
        return Err(Error::InvalidInput(format!("{}: every cell has missing values in the fit range", f.name)));
    }
    let m = cols.len();
    if m < k {
        return Err(Error::InvalidInput(format!("{}: {m} usable cells, fewer than {k} components", f.name)));
    }

    let mut x = DMatrix::<f64>::from_fn(n, m, |i, j| f.values()[[rows[i], cols[j]]]);
    let mut mean = vec![0.0; m];
    for (j, mu) in mean.iter_mut().enumerate() {
        *mu = x.column(j).iter().sum::<f64>() / n as f64;
        x.column_mut(j).add_scalar_mut(-*mu);
    }
    let denom = (n - 1) as f64;

    let (variances, mut patterns) = if m <= n {
        let cov = x.transpose() * &x / denom;
        let (vals, vecs) = symmetric_eigen(cov)?;
        (vals[..k].to_vec(), vecs.columns(0, k).into_owned())
    } else {
        let gram = &x * x.transpose() / denom;
        let (vals, vecs) = symmetric_eigen(gram)?;
        let mut pats = DMatrix::<f64>::zeros(m, k);
        let scale_floor = vals[0].max(1.0) * 1e-12;
        let mut filled = 0;
        for (i, &lambda) in vals.iter().take(k).enumerate() {
            if lambda <= scale_floor {
                break;
            }
            let v = x.transpose() * vecs.column(i) / (denom * lambda).sqrt();
            pats.set_column(i, &v);
            filled += 1;
        }
        complete_orthonormal(&mut pats, filled);
        (vals[..k].iter().enumerate().map(|(i, &v)| if i < filled { v } else { 0.0 }).collect(), pats)
    };

    // sign convention: the largest-magnitude weight of each pattern is positive
    for mut col in patterns.column_iter_mut() {
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| if v.abs() > best.1.abs() { (i, v) } else { best });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }

    let mut loadings = Array2::zeros((f.n_cells(), k));
    let mut cell_mean = Array1::zeros(f.n_cells());
    for (j, &c) in cols.iter().enumerate() {
        cell_mean[c] = mean[j];
        for i in 0..k {
            loadings[[c, i]] = patterns[(j, i)];
        }
    }
    Ok(EofBasis {
        variable: f.name.clone(),
        grid: f.grid.clone(),
        fit_years,
        cell_mean,
        active,
        loadings,
        explained_variance: Array1::from(variances),
    })
}

/// Extends the first `filled` orthonormal columns of `pats` to a full
/// orthonormal set using Gram-Schmidt on the standard basis.
fn complete_orthonormal(pats: &mut DMatrix<f64>, filled: usize) {
    let (m, k) = pats.shape();
    let mut next = filled;
    for e in 0..m {
        if next == k {
            break;
        }
        let mut v = nalgebra::DVector::<f64>::zeros(m);
        v[e] = 1.0;
        for _ in 0..2 {
            for j in 0..next {
                let proj = pats.column(j).dot(&v);
                v -= pats.column(j) * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            pats.set_column(next, &(v / norm));
            next += 1;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EofMeta {
    variable: String,
    fit_years: (i32, i32),
    explained_variance: Vec<f64>,
    active: Vec<bool>,
    loadings: String,
    cell_mean: String,
}

fn pseudo_start() -> Date {
    Date::ymd(2001, 1, 1)
}

/// JSON metadata plus loadings (k pseudo-dates) and cell mean (1 pseudo-date) in field format.
pub fn write_eof(basis: &EofBasis, manifest_path: &Path) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("eof");
    let loadings = format!("{stem}_loadings.json");
    let cell_mean = format!("{stem}_mean.json");
    let l = GriddedField::from_values(&basis.variable, "loading", basis.grid.clone(), pseudo_start(), basis.loadings.t().to_owned())?;
    write_field(&l, &dir.join(&loadings))?;
    let mu = basis.cell_mean.clone().insert_axis(ndarray::Axis(0));
    write_field(&GriddedField::from_values(&basis.variable, "mean", basis.grid.clone(), pseudo_start(), mu)?, &dir.join(&cell_mean))?;
    let meta = EofMeta {
        variable: basis.variable.clone(),
        fit_years: basis.fit_years,
        explained_variance: basis.explained_variance.to_vec(),
        active: basis.active.clone(),
        loadings,
        cell_mean,
    };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(manifest_path, e))
}

pub fn read_eof(manifest_path: &Path) -> Result<EofBasis> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let meta: EofMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest { path: manifest_path.to_path_buf(), message: e.to_string() })?;
    let l = read_field(&dir.join(&meta.loadings))?;
    let mu = read_field(&dir.join(&meta.cell_mean))?;
    Ok(EofBasis {
        variable: meta.variable,
        grid: l.grid.clone(),
        fit_years: meta.fit_years,
        cell_mean: mu.values().row(0).to_owned(),
        active: meta.active,
        loadings: l.values().t().to_owned(),
        explained_variance: Array1::from(meta.explained_variance),
    })
}
