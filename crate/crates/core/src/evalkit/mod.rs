//! Skill metrics, summaries and the monthly evaluation driver.

mod pipeline;

pub use pipeline::*;

use std::io::Write;
use std::path::Path;

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timegrid::Date;

/// Norms below this make a cosine undefined; it is reported as 0.
pub const NORM_FLOOR: f64 = 1e-12;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Ok(0.0);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine across locations at one date.
pub fn spatial_skill(pred: ArrayView1<'_, f64>, truth: ArrayView1<'_, f64>) -> Result<f64> {
    cosine(pred, truth)
}

/// Cosine across dates at one location.
pub fn temporal_skill(pred: ArrayView1<'_, f64>, truth: ArrayView1<'_, f64>) -> Result<f64> {
    cosine(pred, truth)
}

/// `1 - SSE(pred) / SSE(baseline)`.
pub fn relative_r2(pred: ArrayView1<'_, f64>, truth: ArrayView1<'_, f64>, baseline: ArrayView1<'_, f64>) -> Result<f64> {
    if pred.len() != truth.len() || baseline.len() != truth.len() {
        return Err(Error::Dimension("relative R2 inputs differ in length".into()));
    }
    let den: f64 = truth.iter().zip(baseline).map(|(y, b)| (y - b).powi(2)).sum();
    if den <= NORM_FLOOR {
        return Err(Error::Numerical("relative R2 denominator is degenerate".into()));
    }
    let num: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - num / den)
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub value: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Stat,
    pub median: Stat,
    pub q25: Stat,
    pub q75: Stat,
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean with its analytic standard error; median and quartiles with
/// bootstrap standard errors from a seeded generator.
pub fn summarize(values: &[f64], seed: u64) -> Result<Summary> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 values to summarize, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("summary input".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let s = sorted(values);
    let qs = [0.5, 0.25, 0.75];
    let point: Vec<f64> = qs.iter().map(|&q| quantile_sorted(&s, q)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boot = vec![Vec::with_capacity(BOOTSTRAP_RESAMPLES); 3];
    let mut sample = vec![0.0; n];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for v in sample.iter_mut() {
            *v = values[rng.random_range(0..n)];
        }
        sample.sort_by(f64::total_cmp);
        for (b, &q) in boot.iter_mut().zip(&qs) {
            b.push(quantile_sorted(&sample, q));
        }
    }
    let se = |b: &[f64]| {
        let m = b.iter().sum::<f64>() / b.len() as f64;
        (b.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b.len() - 1) as f64).sqrt()
    };
    Ok(Summary {
        n,
        mean: Stat { value: mean, se: (var / n as f64).sqrt() },
        median: Stat { value: point[0], se: se(&boot[0]) },
        q25: Stat { value: point[1], se: se(&boot[1]) },
        q75: Stat { value: point[2], se: se(&boot[2]) },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DateSkill {
    pub date: Date,
    pub plan: String,
    pub spatial_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSkill {
    pub cell: usize,
    pub lat: f64,
    pub lon: f64,
    pub temporal_cosine: f64,
    pub relative_r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFailure {
    pub plan: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub model: String,
    pub plans: Vec<String>,
    pub seed: u64,
    pub se_method: String,
    pub per_date: Vec<DateSkill>,
    pub per_cell: Vec<CellSkill>,
    pub spatial: Option<Summary>,
    pub temporal: Option<Summary>,
    pub r2: Option<Summary>,
    /// Relative R² pooled over every test date and cell.
    pub pooled_r2: Option<f64>,
    pub excluded_dates: usize,
    pub excluded_cells: usize,
    pub failures: Vec<PlanFailure>,
    pub audit: Vec<PlanAudit>,
    /// Tuned hyper-parameter per plan, as a readable string.
    pub tuned: Vec<(String, String)>,
}

impl SkillReport {
    pub fn mean_spatial(&self) -> f64 {
        self.spatial.as_ref().map_or(f64::NAN, |s| s.mean.value)
    }

    /// Recomputes the summaries from the stored per-unit values.
    pub fn recompute_summaries(&self) -> Result<(Option<Summary>, Option<Summary>, Option<Summary>)> {
        let sp: Vec<f64> = self.per_date.iter().map(|d| d.spatial_cosine).collect();
        let tc: Vec<f64> = self.per_cell.iter().map(|c| c.temporal_cosine).collect();
        let r2: Vec<f64> = self.per_cell.iter().map(|c| c.relative_r2).filter(|v| v.is_finite()).collect();
        let f = |v: &[f64], s: u64| if v.len() >= 2 { summarize(v, s).map(Some) } else { Ok(None) };
        Ok((f(&sp, self.seed)?, f(&tc, self.seed.wrapping_add(1))?, f(&r2, self.seed.wrapping_add(2))?))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let dates = dir.join(format!("{stem}_dates.csv"));
        let mut w = csv::Writer::from_path(&dates)?;
        w.write_record(["date", "plan", "spatial_cosine"])?;
        for d in &self.per_date {
            w.write_record([d.date.to_string(), d.plan.clone(), d.spatial_cosine.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&dates, e))?;
        let cells = dir.join(format!("{stem}_cells.csv"));
        let mut w = csv::Writer::from_path(&cells)?;
        w.write_record(["cell", "lat", "lon", "temporal_cosine", "relative_r2"])?;
        for c in &self.per_cell {
            w.write_record([c.cell.to_string(), c.lat.to_string(), c.lon.to_string(), c.temporal_cosine.to_string(), c.relative_r2.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&cells, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One Table-2 style row: `model,mean,mean_se,median,median_se,q25,q25_se,q75,q75_se`.
pub fn write_comparison(reports: &[SkillReport], out: &Path) -> Result<()> {
    let mut f = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut text = String::from("model,metric,mean,mean_se,median,median_se,q25,q25_se,q75,q75_se\n");
    for r in reports {
        for (metric, s) in [("spatial_cosine", &r.spatial), ("temporal_cosine", &r.temporal), ("relative_r2", &r.r2)] {
            if let Some(s) = s {
                text.push_str(&format!(
                    "{},{metric},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    r.model, s.mean.value, s.mean.se, s.median.value, s.median.se, s.q25.value, s.q25.se, s.q75.value, s.q75.se
                ));
            }
        }
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(out, e))
}

/// Builds the report from per-date predictions, truths and baselines (rows aligned with `dates`).
#[allow(clippy::too_many_arguments)]
pub fn build_report(
    model: &str,
    seed: u64,
    dates: &[(Date, String)],
    pred: &ndarray::Array2<f64>,
    truth: &ndarray::Array2<f64>,
    baseline: &ndarray::Array2<f64>,
    cell_coords: &[(usize, f64, f64)],
) -> Result<SkillReport> {
    let mut per_date = Vec::new();
    let mut excluded_dates = 0;
    for (i, (d, plan)) in dates.iter().enumerate() {
        let t = truth.row(i);
        if t.dot(&t).sqrt() < NORM_FLOOR {
            excluded_dates += 1;
            continue;
        }
        per_date.push(DateSkill { date: *d, plan: plan.clone(), spatial_cosine: spatial_skill(pred.row(i), t)? });
    }
    let mut per_cell = Vec::new();
    let mut excluded_cells = 0;
    if !dates.is_empty() {
        for (k, &(cell, lat, lon)) in cell_coords.iter().enumerate() {
            let t = truth.column(k);
            if t.dot(&t).sqrt() < NORM_FLOOR {
                excluded_cells += 1;
                continue;
            }
            let r2 = relative_r2(pred.column(k), t, baseline.column(k)).unwrap_or(f64::NAN);
            per_cell.push(CellSkill { cell, lat, lon, temporal_cosine: temporal_skill(pred.column(k), t)?, relative_r2: r2 });
        }
    }
    let pooled_r2 = if dates.is_empty() {
        None
    } else {
        relative_r2(
            pred.view().into_shape_with_order(pred.len()).map_err(|e| Error::Dimension(e.to_string()))?,
            truth.view().into_shape_with_order(truth.len()).map_err(|e| Error::Dimension(e.to_string()))?,
            baseline.view().into_shape_with_order(baseline.len()).map_err(|e| Error::Dimension(e.to_string()))?,
        )
        .ok()
    };
    let mut report = SkillReport {
        model: model.to_string(),
        plans: Vec::new(),
        seed,
        se_method: format!("mean: sample std / sqrt(n); quantiles: bootstrap over units ({BOOTSTRAP_RESAMPLES} resamples)"),
        per_date,
        per_cell,
        spatial: None,
        temporal: None,
        r2: None,
        pooled_r2,
        excluded_dates,
        excluded_cells,
        failures: Vec::new(),
        audit: Vec::new(),
        tuned: Vec::new(),
    };
    let (s, t, r) = report.recompute_summaries()?;
    report.spatial = s;
    report.temporal = t;
    report.r2 = r;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    #[test]
    fn cosine_identities() {
        let y = array![1.0, -2.0, 0.5];
        assert_abs_diff_eq!(cosine(y.view(), y.view()).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine(y.view(), (-&y).view()).unwrap(), -1.0, epsilon = 1e-15);
        assert_eq!(cosine(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        assert_eq!(cosine(Array1::zeros(3).view(), y.view()).unwrap(), 0.0);
        assert!(cosine(y.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn sign_flipped_cell() {
        let truth = array![[1.0, 2.0, -1.0], [0.5, -1.0, 2.0], [1.5, 1.0, 1.0]];
        let mut pred = truth.clone();
        pred.column_mut(1).mapv_inplace(|v| -v);
        for i in 0..3 {
            assert!(spatial_skill(pred.row(i), truth.row(i)).unwrap() < 1.0);
        }
        assert_abs_diff_eq!(temporal_skill(pred.column(1), truth.column(1)).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(temporal_skill(pred.column(0), truth.column(0)).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn r2_cases() {
        let truth = array![1.0, -1.0, 2.0, -2.0];
        let base = Array1::zeros(4);
        assert_eq!(relative_r2(base.view(), truth.view(), base.view()).unwrap(), 0.0);
        assert_eq!(relative_r2(truth.view(), truth.view(), base.view()).unwrap(), 1.0);
        // error twice as large as the baseline's: 1 - 4 = -3
        let doubled = &truth * -1.0;
        assert_abs_diff_eq!(relative_r2(doubled.view(), truth.view(), base.view()).unwrap(), -3.0, epsilon = 1e-12);
        assert!(relative_r2(base.view(), base.view(), base.view()).is_err());
    }

    #[test]
    fn summary_two_points() {
        let s = summarize(&[0.0, 1.0], 0).unwrap();
        assert_eq!(s.mean.value, 0.5);
        // sample std sqrt(1/2) over sqrt(2)
        assert_abs_diff_eq!(s.mean.se, 0.5, epsilon = 1e-12);
        assert_eq!(s.median.value, 0.5);
        assert_eq!(s.q25.value, 0.25);
        let c = summarize(&[2.0; 10], 3).unwrap();
        assert_eq!((c.mean.se, c.median.se, c.q25.se, c.q75.se), (0.0, 0.0, 0.0, 0.0));
        assert!(summarize(&[1.0], 0).is_err());
        assert_eq!(summarize(&[3.0, 1.0, 2.0], 9).unwrap(), summarize(&[3.0, 1.0, 2.0], 9).unwrap());
    }

    proptest! {
        #[test]
        fn quantiles_ordered(v in proptest::collection::vec(-10.0f64..10.0, 2..40), seed in 0u64..100) {
            let s = summarize(&v, seed).unwrap();
            prop_assert!(s.q25.value <= s.median.value && s.median.value <= s.q75.value);
        }

        #[test]
        fn spatial_skill_scale_invariant(v in proptest::collection::vec(-5.0f64..5.0, 3..20), c in 0.01f64..100.0) {
            let y = Array1::from(v.clone());
            let p = Array1::from_iter(v.iter().rev().copied());
            let base = spatial_skill(p.view(), y.view()).unwrap();
            prop_assert!((spatial_skill((&p * c).view(), y.view()).unwrap() - base).abs() < 1e-12);
            prop_assert!((spatial_skill((&p * -1.0).view(), y.view()).unwrap() + base).abs() < 1e-12);
        }
    }
}
