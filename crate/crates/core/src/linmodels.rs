//! Multitask Lasso, least-squares baselines, damped persistence, MultiLLR and AutoKNN.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::climatology::TargetSeries;
use crate::error::{Error, Result};
use crate::evalkit::cosine;
use crate::timegrid::{Date, DateRange};

/// Relative ridge added to normal equations for conditioning.
pub const RIDGE_FLOOR: f64 = 1e-10;
/// Relative slack on the group threshold so rounding cannot revive a row at `lambda_max`.
const ZERO_MARGIN: f64 = 1e-12;

fn check_finite(name: &str, a: ArrayView2<'_, f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn check_rows(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::Dimension(format!("X has {} rows, Y has {}", x.nrows(), y.nrows())));
    }
    Ok(())
}

/// Column means and population standard deviations; constant columns keep scale 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
        let scale = Array1::from_iter(x.axis_iter(Axis(1)).zip(mean.iter()).map(|(c, m)| {
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 { sd } else { 1.0 }
        }));
        Self { mean, scale }
    }

    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    /// Stop when no coefficient moves by more than this in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_sweeps: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskLassoModel {
    /// `p x G` on the standardized feature scale.
    pub coef: Array2<f64>,
    pub intercept: Array1<f64>,
    pub lambda: f64,
    pub scaling: Standardizer,
    pub sweeps: usize,
    pub kkt_residual: f64,
    /// Objective after each sweep.
    pub objective: Vec<f64>,
}

impl MultitaskLassoModel {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.coef.nrows() {
            return Err(Error::Dimension(format!("model has {} features, input {}", self.coef.nrows(), x.ncols())));
        }
        Ok(self.scaling.transform(x).dot(&self.coef) + &self.intercept)
    }

    pub fn nonzero_rows(&self) -> Vec<bool> {
        self.coef.axis_iter(Axis(0)).map(|r| r.iter().any(|&v| v != 0.0)).collect()
    }

    /// Coefficients on the original feature scale.
    pub fn raw_coef(&self) -> Array2<f64> {
        &self.coef / &self.scaling.scale.view().insert_axis(Axis(1))
    }
}

/// Sufficient statistics of a standardized multitask regression, reusable
/// across penalties.
#[derive(Clone, Debug)]
pub struct LassoProblem {
    n: usize,
    scaling: Standardizer,
    y_mean: Array1<f64>,
    gram: Array2<f64>,
    xty: Array2<f64>,
    yty: f64,
}

impl LassoProblem {
    pub fn new(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Self> {
        check_rows(x, y)?;
        if x.nrows() < 2 {
            return Err(Error::InvalidInput("lasso needs at least 2 rows".into()));
        }
        check_finite("lasso design", x)?;
        check_finite("lasso targets", y)?;
        let scaling = Standardizer::fit(x);
        let xs = scaling.transform(x);
        let y_mean = y.mean_axis(Axis(0)).unwrap();
        let yc = &y - &y_mean;
        Ok(Self {
            n: x.nrows(),
            gram: xs.t().dot(&xs),
            xty: xs.t().dot(&yc),
            yty: yc.iter().map(|v| v * v).sum(),
            scaling,
            y_mean,
        })
    }

    pub fn n_features(&self) -> usize {
        self.gram.nrows()
    }

    /// Smallest penalty for which the all-zero solution is optimal.
    pub fn lambda_max(&self) -> f64 {
        self.xty
            .axis_iter(Axis(0))
            .map(|r| r.dot(&r).sqrt() / self.n as f64)
            .fold(0.0, f64::max)
    }

    fn objective(&self, coef: &Array2<f64>, q: &Array2<f64>, lambda: f64) -> f64 {
        let n = self.n as f64;
        let cross: f64 = coef.iter().zip(self.xty.iter()).map(|(a, b)| a * b).sum();
        let quad: f64 = coef.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
        let pen: f64 = coef.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).sum();
        (self.yty - 2.0 * cross + quad) / (2.0 * n) + lambda * pen
    }

    /// Worst violation of the subgradient optimality conditions.
    pub fn kkt_residual(&self, coef: &Array2<f64>, lambda: f64) -> f64 {
        let n = self.n as f64;
        let grad = (self.gram.dot(coef) - &self.xty) / n;
        let mut worst = 0.0f64;
        for (j, (g, c)) in grad.axis_iter(Axis(0)).zip(coef.axis_iter(Axis(0))).enumerate() {
            if self.gram[[j, j]] == 0.0 {
                continue;
            }
            let cn = c.dot(&c).sqrt();
            let r = if cn > 0.0 {
                (&g + &(&c * (lambda / cn))).mapv(|v| v * v).sum().sqrt()
            } else {
                (g.dot(&g).sqrt() - lambda).max(0.0)
            };
            worst = worst.max(r);
        }
        worst
    }

    /// Block coordinate descent with group soft-thresholding of each row.
    pub fn fit(&self, lambda: f64, warm: Option<&Array2<f64>>, opts: &LassoOptions) -> Result<MultitaskLassoModel> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let (p, g) = self.xty.dim();
        let n = self.n as f64;
        let mut coef = match warm {
            Some(w) if w.dim() == (p, g) => w.clone(),
            _ => Array2::zeros((p, g)),
        };
        let mut q = self.gram.dot(&coef);
        let mut objective = vec![self.objective(&coef, &q, lambda)];
        let mut z = Array1::zeros(g);
        for sweep in 1..=opts.max_sweeps {
            let mut max_change = 0.0f64;
            for j in 0..p {
                let d = self.gram[[j, j]] / n;
                if d == 0.0 {
                    continue;
                }
                for k in 0..g {
                    z[k] = (self.xty[[j, k]] - q[[j, k]]) / n + d * coef[[j, k]];
                }
                let norm = z.dot(&z).sqrt();
                let shrink = if norm > lambda * (1.0 + ZERO_MARGIN) { (1.0 - lambda / norm) / d } else { 0.0 };
                let mut changed = false;
                for k in 0..g {
                    let new = shrink * z[k];
                    let delta = new - coef[[j, k]];
                    if delta != 0.0 {
                        changed = true;
                        max_change = max_change.max(delta.abs());
                        coef[[j, k]] = new;
                        z[k] = delta;
                    } else {
                        z[k] = 0.0;
                    }
                }
                if changed {
                    let col = self.gram.column(j);
                    for i in 0..p {
                        let gij = col[i];
                        if gij != 0.0 {
                            for k in 0..g {
                                q[[i, k]] += gij * z[k];
                            }
                        }
                    }
                }
            }
            let f = self.objective(&coef, &q, lambda);
            let prev = *objective.last().unwrap();
            if f > prev + 1e-10 * prev.abs().max(1.0) {
                return Err(Error::Numerical(format!("lasso objective increased at sweep {sweep}: {prev} -> {f}")));
            }
            objective.push(f);
            if max_change < opts.tol {
                return Ok(MultitaskLassoModel {
                    kkt_residual: self.kkt_residual(&coef, lambda),
                    coef,
                    intercept: self.y_mean.clone(),
                    lambda,
                    scaling: self.scaling.clone(),
                    sweeps: sweep,
                    objective,
                });
            }
        }
        Err(Error::NotConverged { sweeps: opts.max_sweeps, kkt_residual: self.kkt_residual(&coef, lambda) })
    }

    /// Fits along a penalty path, warm-starting each fit from the previous one.
    pub fn fit_path(&self, lambdas: &[f64], opts: &LassoOptions) -> Result<Vec<MultitaskLassoModel>> {
        let mut out: Vec<MultitaskLassoModel> = Vec::with_capacity(lambdas.len());
        for &l in lambdas {
            let m = self.fit(l, out.last().map(|m| &m.coef), opts)?;
            out.push(m);
        }
        Ok(out)
    }
}

pub fn fit_multitask_lasso(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, lambda: f64) -> Result<MultitaskLassoModel> {
    LassoProblem::new(x, y)?.fit(lambda, None, &LassoOptions::default())
}

/// Logarithmic grid from `lambda_max` down to `lambda_max * ratio`.
pub fn lambda_grid(lambda_max: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lambda_max];
    }
    (0..n)
        .map(|i| lambda_max * ratio.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Shared-design linear map `X * coef + intercept`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coef: Array2<f64>,
    pub intercept: Array1<f64>,
}

pub fn predict_linear(model: &LinearModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.coef.nrows() {
        return Err(Error::Dimension(format!("model has {} features, input {}", model.coef.nrows(), x.ncols())));
    }
    Ok(x.dot(&model.coef) + &model.intercept)
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Solves `(A + ridge * mean(diag A) * I) X = B` for symmetric positive semi-definite `A`.
pub fn solve_ridge(a: &Array2<f64>, b: &Array2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let p = a.nrows();
    if p == 0 {
        return Ok(Array2::zeros((0, b.ncols())));
    }
    let scale = (a.diag().sum() / p as f64).max(1.0);
    let mut m = to_dmatrix(a);
    for i in 0..p {
        m[(i, i)] += ridge * scale;
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal equations are rank deficient beyond the ridge floor".into()))?;
    let sol = chol.solve(&to_dmatrix(b));
    Ok(Array2::from_shape_fn((p, b.ncols()), |(i, j)| sol[(i, j)]))
}

/// Ordinary least squares with intercept, solved for all targets at once.
pub fn fit_ols(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, ridge: f64) -> Result<LinearModel> {
    check_rows(x, y)?;
    check_finite("design", x)?;
    check_finite("targets", y)?;
    if x.nrows() == 0 {
        return Err(Error::Empty("no rows to fit".into()));
    }
    let xm = x.mean_axis(Axis(0)).unwrap();
    let ym = y.mean_axis(Axis(0)).unwrap();
    let xc = &x - &xm;
    let yc = &y - &ym;
    let coef = solve_ridge(&xc.t().dot(&xc), &xc.t().dot(&yc), ridge)?;
    let intercept = &ym - &xm.dot(&coef);
    Ok(LinearModel { coef, intercept })
}

/// Per-location regression on the climate indices at the forecast date.
pub fn fit_ls_indices(indices: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<LinearModel> {
    if indices.nrows() <= indices.ncols() + 1 {
        return Err(Error::InvalidInput(format!(
            "need more than {} rows for {} indices, got {}",
            indices.ncols() + 1,
            indices.ncols(),
            indices.nrows()
        )));
    }
    fit_ols(indices, y, RIDGE_FLOOR)
}

/// `y_g ~ alpha_g * recent_g + intercept_g` at every location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampedPersistence {
    pub alpha: Array1<f64>,
    pub intercept: Array1<f64>,
}

impl DampedPersistence {
    pub fn predict(&self, recent: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if recent.ncols() != self.alpha.len() {
            return Err(Error::Dimension(format!("model has {} cells, input {}", self.alpha.len(), recent.ncols())));
        }
        Ok(&recent * &self.alpha + &self.intercept)
    }
}

/// Simple regression per location; a constant predictor gets slope 0 and the mean as intercept.
pub fn fit_damped_persistence(recent: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<DampedPersistence> {
    if recent.dim() != y.dim() {
        return Err(Error::Dimension(format!("anomaly {:?} vs target {:?}", recent.dim(), y.dim())));
    }
    if y.nrows() < 3 {
        return Err(Error::InvalidInput("damped persistence needs at least 3 rows".into()));
    }
    check_finite("recent anomaly", recent)?;
    check_finite("targets", y)?;
    let g = y.ncols();
    let mut alpha = Array1::zeros(g);
    let mut intercept = Array1::zeros(g);
    for k in 0..g {
        let (a, b) = simple_regression(recent.column(k), y.column(k));
        alpha[k] = a;
        intercept[k] = b;
    }
    Ok(DampedPersistence { alpha, intercept })
}

fn simple_regression(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.sum() / n, y.sum() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 1e-12 * n {
        return (0.0, my);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// OLS with intercept for one location given its predictor columns.
fn ols_columns(cols: &[ArrayView1<'_, f64>], y: ArrayView1<'_, f64>, rows: &[usize]) -> Result<(Vec<f64>, f64)> {
    let s = cols.len();
    let n = rows.len() as f64;
    if rows.is_empty() {
        return Err(Error::Empty("no rows for regression".into()));
    }
    let my = rows.iter().map(|&i| y[i]).sum::<f64>() / n;
    let means: Vec<f64> = cols.iter().map(|c| rows.iter().map(|&i| c[i]).sum::<f64>() / n).collect();
    if s == 0 {
        return Ok((vec![], my));
    }
    let mut a = Array2::zeros((s, s));
    let mut b = Array2::zeros((s, 1));
    for &i in rows {
        let yi = y[i] - my;
        for u in 0..s {
            let xu = cols[u][i] - means[u];
            b[[u, 0]] += xu * yi;
            for v in u..s {
                a[[u, v]] += xu * (cols[v][i] - means[v]);
            }
        }
    }
    for u in 0..s {
        for v in 0..u {
            a[[u, v]] = a[[v, u]];
        }
    }
    let beta = solve_ridge(&a, &b, RIDGE_FLOOR)?;
    let beta: Vec<f64> = beta.column(0).to_vec();
    let intercept = my - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    Ok((beta, intercept))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLlrConfig {
    /// Training dates within this many days of year of the target are pooled.
    pub span_days: u32,
    pub n_folds: usize,
    pub eliminate: bool,
}

impl Default for MultiLlrConfig {
    fn default() -> Self {
        Self { span_days: 28, n_folds: 5, eliminate: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLlrModel {
    pub selected: Vec<usize>,
    /// `|selected| x G`.
    pub beta: Array2<f64>,
    pub intercept: Array1<f64>,
    pub span_days: u32,
    pub target_doy: u32,
    /// Held-out skill after each elimination step, starting with all candidates.
    pub skill_trace: Vec<f64>,
}

impl MultiLlrModel {
    /// `candidates[c]` is an `m x G` matrix holding predictor `c` at every location.
    pub fn predict(&self, candidates: &[Array2<f64>]) -> Result<Array2<f64>> {
        let first = candidates.first().ok_or_else(|| Error::InvalidInput("no candidates".into()))?;
        let (m, g) = first.dim();
        if g != self.intercept.len() {
            return Err(Error::Dimension(format!("model has {} cells, input {g}", self.intercept.len())));
        }
        let mut out = Array2::from_shape_fn((m, g), |(_, k)| self.intercept[k]);
        for (s, &c) in self.selected.iter().enumerate() {
            let cand = candidates.get(c).ok_or_else(|| Error::Dimension(format!("missing candidate {c}")))?;
            out += &(cand * &self.beta.row(s));
        }
        Ok(out)
    }
}

pub fn doy_distance(a: u32, b: u32) -> u32 {
    let d = a.abs_diff(b);
    d.min(365 - d)
}

fn fit_selected(cands: &[Array2<f64>], y: &Array2<f64>, selected: &[usize], rows: &[usize]) -> Result<(Array2<f64>, Array1<f64>)> {
    let g = y.ncols();
    let mut beta = Array2::zeros((selected.len(), g));
    let mut intercept = Array1::zeros(g);
    for k in 0..g {
        let cols: Vec<_> = selected.iter().map(|&c| cands[c].column(k)).collect();
        let (b, a) = ols_columns(&cols, y.column(k), rows)?;
        for (s, v) in b.into_iter().enumerate() {
            beta[[s, k]] = v;
        }
        intercept[k] = a;
    }
    Ok((beta, intercept))
}

fn heldout_skill(cands: &[Array2<f64>], y: &Array2<f64>, selected: &[usize], folds: &[Vec<usize>], pool: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for fold in folds {
        let train: Vec<usize> = pool.iter().copied().filter(|i| !fold.contains(i)).collect();
        if train.is_empty() {
            continue;
        }
        let (beta, intercept) = fit_selected(cands, y, selected, &train)?;
        for &i in fold {
            let mut pred = intercept.clone();
            for (s, &c) in selected.iter().enumerate() {
                pred += &(&cands[c].row(i) * &beta.row(s));
            }
            total += cosine(pred.view(), y.row(i))?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Backward stepwise selection over per-location candidate predictors on a
/// day-of-year window around the target, then per-location least squares.
pub fn fit_multillr(
    candidates: &[Array2<f64>],
    y: ArrayView2<'_, f64>,
    dates: &[Date],
    target_doy: u32,
    cfg: &MultiLlrConfig,
) -> Result<MultiLlrModel> {
    if candidates.len() < 2 {
        return Err(Error::InvalidInput("MultiLLR needs at least 2 candidate predictors".into()));
    }
    if dates.len() != y.nrows() || candidates.iter().any(|c| c.dim() != y.dim()) {
        return Err(Error::Dimension("candidates, targets and dates must align".into()));
    }
    let y = y.to_owned();
    let pool: Vec<usize> = (0..dates.len())
        .filter(|&i| doy_distance(dates[i].day_of_year(), target_doy) <= cfg.span_days)
        .collect();
    if pool.is_empty() {
        return Err(Error::Empty(format!("no training dates within {} days of doy {target_doy}", cfg.span_days)));
    }
    let mut years: Vec<i32> = pool.iter().map(|&i| dates[i].year()).collect();
    years.sort_unstable();
    years.dedup();
    let n_folds = cfg.n_folds.clamp(1, years.len());
    let folds: Vec<Vec<usize>> = (0..n_folds)
        .map(|f| {
            pool.iter()
                .copied()
                .filter(|&i| years.iter().position(|&yr| yr == dates[i].year()).unwrap() % n_folds == f)
                .collect()
        })
        .collect();
    let mut selected: Vec<usize> = (0..candidates.len()).collect();
    let mut skill_trace = Vec::new();
    if cfg.eliminate && n_folds > 1 {
        let mut best = heldout_skill(candidates, &y, &selected, &folds, &pool)?;
        skill_trace.push(best);
        while selected.len() > 1 {
            let mut step: Option<(usize, f64)> = None;
            for drop in 0..selected.len() {
                let trial: Vec<usize> = selected.iter().enumerate().filter(|&(i, _)| i != drop).map(|(_, &c)| c).collect();
                let s = heldout_skill(candidates, &y, &trial, &folds, &pool)?;
                if s > step.map_or(f64::NEG_INFINITY, |(_, b)| b) {
                    step = Some((drop, s));
                }
            }
            match step {
                Some((drop, s)) if s > best => {
                    selected.remove(drop);
                    best = s;
                    skill_trace.push(s);
                }
                _ => break,
            }
        }
    }
    let (beta, intercept) = fit_selected(candidates, &y, &selected, &pool)?;
    Ok(MultiLlrModel { selected, beta, intercept, span_days: cfg.span_days, target_doy, skill_trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoKnnConfig {
    /// Days of history averaged in the similarity.
    pub history: usize,
    pub lag: i64,
    pub k: usize,
    /// Regression pool half-width in days of year around the target.
    pub span_days: u32,
}

impl Default for AutoKnnConfig {
    fn default() -> Self {
        Self { history: 60, lag: 365, k: 20, span_days: 28 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoKnnModel {
    pub target_date: Date,
    pub neighbors: Vec<Date>,
    pub similarities: Vec<f64>,
    /// `k x G` weights on the neighbor-lagged values.
    pub beta: Array2<f64>,
    pub intercept: Array1<f64>,
}

/// `sim_t`: mean spatial cosine between the histories preceding `t - lag` and `t* - lag`.
pub fn knn_similarity(y: &TargetSeries, t: Date, t_star: Date, history: usize, lag: i64) -> Option<f64> {
    let mut total = 0.0;
    for m in 0..history as i64 {
        let a = y.row(t.add_days(-lag - m))?;
        let b = y.row(t_star.add_days(-lag - m))?;
        total += cosine(a, b).ok()?;
    }
    Some(total / history as f64)
}

/// Picks the `k` training dates most similar to `t_star`, then regresses each
/// location's target on its values at the same lags and predicts `t_star`.
pub fn fit_autoknn(y: &TargetSeries, train: DateRange, t_star: Date, cfg: &AutoKnnConfig) -> Result<(AutoKnnModel, Array1<f64>)> {
    if cfg.k == 0 || cfg.history == 0 {
        return Err(Error::InvalidInput("k and history must be positive".into()));
    }
    if knn_similarity(y, t_star, t_star, cfg.history, cfg.lag).is_none() {
        return Err(Error::InsufficientHistory(format!("no target history {} days before {t_star}", cfg.lag)));
    }
    let mut scored: Vec<(Date, f64)> = train
        .iter()
        .filter(|&t| t < t_star && y.row(t).is_some())
        .filter_map(|t| knn_similarity(y, t, t_star, cfg.history, cfg.lag).map(|s| (t, s)))
        .collect();
    if scored.len() < cfg.k {
        return Err(Error::InsufficientHistory(format!("{} neighbor candidates for k = {}", scored.len(), cfg.k)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(cfg.k);
    let lags: Vec<i64> = scored.iter().map(|(t, _)| t_star.days_since(*t)).collect();
    let target_doy = t_star.day_of_year();
    let rows: Vec<Date> = train
        .iter()
        .filter(|&s| doy_distance(s.day_of_year(), target_doy) <= cfg.span_days)
        .filter(|&s| y.row(s).is_some() && lags.iter().all(|&l| y.row(s.add_days(-l)).is_some()))
        .collect();
    if rows.len() < cfg.k + 2 {
        return Err(Error::InsufficientHistory(format!("{} regression rows for k = {}", rows.len(), cfg.k)));
    }
    let g = y.n_cells();
    let yt = crate::features::rows_of(y, &rows, "target")?;
    let lagged: Vec<Array2<f64>> = lags
        .iter()
        .map(|&l| {
            let d: Vec<Date> = rows.iter().map(|s| s.add_days(-l)).collect();
            crate::features::rows_of(y, &d, "lagged target")
        })
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..rows.len()).collect();
    let selected: Vec<usize> = (0..lags.len()).collect();
    let (beta, intercept) = fit_selected(&lagged, &yt, &selected, &all)?;
    let mut pred = intercept.clone();
    for (i, (t, _)) in scored.iter().enumerate() {
        pred += &(&y.row(*t).unwrap() * &beta.row(i));
    }
    debug_assert_eq!(pred.len(), g);
    let model = AutoKnnModel {
        target_date: t_star,
        neighbors: scored.iter().map(|s| s.0).collect(),
        similarities: scored.iter().map(|s| s.1).collect(),
        beta,
        intercept,
    };
    Ok((model, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
    }

    /// Normal-equation OLS via an independent Gaussian elimination.
    fn ols_oracle(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let mut xa = Array2::ones((n, x.ncols() + 1));
        xa.slice_mut(ndarray::s![.., 1..]).assign(x);
        let a = xa.t().dot(&xa);
        let b = xa.t().dot(y);
        let p = a.nrows();
        let mut m = ndarray::concatenate![Axis(1), a, b];
        for c in 0..p {
            let piv = (c..p).max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs())).unwrap();
            for k in 0..m.ncols() {
                m.swap([c, k], [piv, k]);
            }
            for r in 0..p {
                if r != c {
                    let f = m[[r, c]] / m[[c, c]];
                    for k in 0..m.ncols() {
                        m[[r, k]] -= f * m[[c, k]];
                    }
                }
            }
        }
        Array2::from_shape_fn((p, y.ncols()), |(i, k)| m[[i, p + k]] / m[[i, i]])
    }

    #[test]
    fn lambda_max_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 40, 6);
        let y = randn(&mut rng, 40, 3);
        let prob = LassoProblem::new(x.view(), y.view()).unwrap();
        let m = prob.fit(prob.lambda_max(), None, &LassoOptions::default()).unwrap();
        assert!(m.coef.iter().all(|&v| v == 0.0));
        let m = prob.fit(prob.lambda_max() * 0.9, None, &LassoOptions::default()).unwrap();
        assert!(m.coef.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_lambda_matches_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 60, 5);
        let y = randn(&mut rng, 60, 4);
        let m = fit_multitask_lasso(x.view(), y.view(), 0.0).unwrap();
        let oracle = ols_oracle(&x, &y);
        let pred = m.predict(x.view()).unwrap();
        let mut xa = Array2::ones((60, 6));
        xa.slice_mut(ndarray::s![.., 1..]).assign(&x);
        let expect = xa.dot(&oracle);
        for (a, b) in pred.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        let raw = m.raw_coef();
        for (a, b) in raw.iter().zip(oracle.slice(ndarray::s![1.., ..]).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn single_task_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 50, 8);
        let y = randn(&mut rng, 50, 1);
        let prob = LassoProblem::new(x.view(), y.view()).unwrap();
        let lambda = prob.lambda_max() * 0.3;
        let m = prob.fit(lambda, None, &LassoOptions::default()).unwrap();
        // recompute the subgradient conditions from scratch
        let xs = m.scaling.transform(x.view());
        let r = &y - &m.predict(x.view()).unwrap();
        for j in 0..8 {
            let c = xs.column(j).dot(&r.column(0)) / 50.0;
            if m.coef[[j, 0]] == 0.0 {
                assert!(c.abs() <= lambda + 1e-6);
            } else {
                assert_abs_diff_eq!(c, lambda * m.coef[[j, 0]].signum(), epsilon = 1e-6);
            }
        }
        assert!(m.kkt_residual < 1e-6);
    }

    #[test]
    fn objective_monotone_and_rows_grouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, 80, 12);
        let y = randn(&mut rng, 80, 5);
        let prob = LassoProblem::new(x.view(), y.view()).unwrap();
        let m = prob.fit(prob.lambda_max() * 0.2, None, &LassoOptions::default()).unwrap();
        assert!(m.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for row in m.coef.axis_iter(Axis(0)) {
            let nz = row.iter().filter(|&&v| v != 0.0).count();
            assert!(nz == 0 || nz == 5);
        }
    }

    #[test]
    fn path_sparsity_non_increasing_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let x = randn(&mut rng, 50, 10);
            let beta = randn(&mut rng, 10, 3);
            let y = x.dot(&beta) + randn(&mut rng, 50, 3);
            let prob = LassoProblem::new(x.view(), y.view()).unwrap();
            let grid = lambda_grid(prob.lambda_max(), 10, 1e-3);
            let path = prob.fit_path(&grid, &LassoOptions::default()).unwrap();
            let counts: Vec<usize> = path.iter().map(|m| m.nonzero_rows().iter().filter(|&&b| b).count()).collect();
            assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
        }
    }

    #[test]
    fn predict_linear_hand_case() {
        let m = LinearModel { coef: ndarray::array![[1.0, 2.0], [3.0, 4.0]], intercept: ndarray::array![0.5, -0.5] };
        let p = predict_linear(&m, ndarray::array![[1.0, 1.0], [2.0, 0.0]].view()).unwrap();
        assert_eq!(p, ndarray::array![[4.5, 5.5], [2.5, 3.5]]);
        let z = predict_linear(&m, Array2::zeros((1, 2)).view()).unwrap();
        assert_eq!(z.row(0), m.intercept);
        assert!(predict_linear(&m, Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn ls_indices_realizable_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, 40, 8);
        let b = randn(&mut rng, 8, 3);
        let y = x.dot(&b) + 2.0;
        let m = fit_ls_indices(x.view(), y.view()).unwrap();
        let r = &y - &predict_linear(&m, x.view()).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-6));
        let c = Array2::from_elem((40, 2), 3.0);
        let m = fit_ls_indices(x.view(), c.view()).unwrap();
        assert!(m.coef.iter().all(|v| v.abs() < 1e-12));
        assert_abs_diff_eq!(m.intercept[0], 3.0, epsilon = 1e-12);
        assert!(fit_ls_indices(x.slice(ndarray::s![..9, ..]), c.slice(ndarray::s![..9, ..])).is_err());
    }

    #[test]
    fn three_point_regression() {
        // x = 0,1,2 ; y = 1,2,4 -> slope 1.5, intercept 5/6
        let x = ndarray::array![[0.0], [1.0], [2.0]];
        let y = ndarray::array![[1.0], [2.0], [4.0]];
        let m = fit_ols(x.view(), y.view(), RIDGE_FLOOR).unwrap();
        assert_abs_diff_eq!(m.coef[[0, 0]], 1.5, epsilon = 1e-8);
        assert_abs_diff_eq!(m.intercept[0], 5.0 / 6.0, epsilon = 1e-8);
    }

    #[test]
    fn damped_persistence_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, 100, 2);
        let m = fit_damped_persistence(a.view(), (&a * 0.5).view()).unwrap();
        assert_abs_diff_eq!(m.alpha[0], 0.5, epsilon = 1e-12);
        let n = 2000;
        let a = randn(&mut rng, n, 1);
        let y = randn(&mut rng, n, 1);
        let m = fit_damped_persistence(a.view(), y.view()).unwrap();
        assert!(m.alpha[0].abs() < 3.0 / (n as f64).sqrt());
        let c = Array2::from_elem((10, 1), 1.0);
        let y = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let m = fit_damped_persistence(c.view(), y.view()).unwrap();
        assert_eq!(m.alpha[0], 0.0);
        assert_abs_diff_eq!(m.intercept[0], 4.5);
    }

    fn daily_dates(n: usize) -> Vec<Date> {
        (0..n).map(|i| Date::ymd(2000, 1, 1).add_days(i as i64)).collect()
    }

    #[test]
    fn multillr_drops_noise() {
        let mut hits = 0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 365 * 6;
            let (signal, noise) = (randn(&mut rng, n, 16), randn(&mut rng, n, 16));
            let y = &signal * 0.8 + randn(&mut rng, n, 16) * 0.6;
            let m = fit_multillr(&[signal, noise], y.view(), &daily_dates(n), 180, &MultiLlrConfig::default()).unwrap();
            if m.selected == vec![0] {
                hits += 1;
            }
            assert!(m.skill_trace.windows(2).all(|w| w[1] > w[0]));
        }
        assert!(hits >= 45, "{hits}/50");
    }

    #[test]
    fn multillr_without_elimination_is_ls() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 400;
        let cands = vec![randn(&mut rng, n, 3), randn(&mut rng, n, 3)];
        let y = randn(&mut rng, n, 3);
        let cfg = MultiLlrConfig { span_days: 183, n_folds: 5, eliminate: false };
        let m = fit_multillr(&cands, y.view(), &daily_dates(n), 1, &cfg).unwrap();
        for k in 0..3 {
            let x = ndarray::stack![Axis(1), cands[0].column(k), cands[1].column(k)];
            let ls = fit_ols(x.view(), y.column(k).insert_axis(Axis(1)), RIDGE_FLOOR).unwrap();
            assert_abs_diff_eq!(ls.coef[[0, 0]], m.beta[[0, k]], epsilon = 1e-10);
            assert_abs_diff_eq!(ls.coef[[1, 0]], m.beta[[1, k]], epsilon = 1e-10);
            assert_abs_diff_eq!(ls.intercept[0], m.intercept[k], epsilon = 1e-10);
        }
    }

    fn periodic_series(years: usize, g: usize) -> TargetSeries {
        let start = Date::ymd(2001, 1, 1);
        let values = Array2::from_shape_fn((365 * years, g), |(t, k)| {
            let ph = (t % 365) as f64 / 365.0 * std::f64::consts::TAU;
            (ph + k as f64).sin() + 0.3 * (3.0 * ph * (k + 1) as f64).cos()
        });
        TargetSeries { start, cells: (0..g).collect(), values }
    }

    #[test]
    fn autoknn_periodic_fixture() {
        let y = periodic_series(8, 4);
        let t_star = Date::ymd(2008, 3, 10);
        let train = DateRange::new(y.start, t_star.add_days(-28));
        let cfg = AutoKnnConfig { k: 3, ..Default::default() };
        let (m, pred) = fit_autoknn(&y, train, t_star, &cfg).unwrap();
        // the fixture repeats every 365 days, so neighbors sit whole periods back
        for d in &m.neighbors {
            assert_eq!(t_star.days_since(*d) % 365, 0, "{d}");
        }
        for (a, b) in pred.iter().zip(y.row(t_star).unwrap()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
        assert!(m.similarities.iter().all(|s| (-1.0 - 1e-12..=1.0 + 1e-12).contains(s)));
        let cfg1 = AutoKnnConfig { k: 1, ..Default::default() };
        let (m1, _) = fit_autoknn(&y, train, t_star, &cfg1).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(m1.beta[[0, k]], 1.0, epsilon = 1e-8);
            assert_abs_diff_eq!(m1.intercept[k], 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn autoknn_needs_history() {
        let y = periodic_series(2, 2);
        let t = Date::ymd(2001, 6, 1);
        assert!(fit_autoknn(&y, DateRange::new(y.start, t), t, &AutoKnnConfig::default()).is_err());
    }
}
