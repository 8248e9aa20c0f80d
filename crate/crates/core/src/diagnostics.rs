//! Dependence measures (MIC, Pearson, Spearman), moving-block bootstrap and
//! grouped feature importance (non-zero counts, split gain, Shapley values).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::spatial_skill;
use crate::features::{column_group, group_names, N_GROUPS};
use crate::gbt::{fit_gbt_multi, predict_multi, GbtParams, TreeEnsemble};
use crate::linmodels::{LassoOptions, LassoProblem, MultitaskLassoModel};

pub const MIC_EXPONENT: f64 = 0.6;
/// Superclump budget per column, as in the reference implementation.
pub const CLUMP_FACTOR: usize = 15;
pub const DEFAULT_BLOCK: usize = 365;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicResult {
    pub mic: f64,
    pub x_bins: usize,
    pub y_bins: usize,
    pub budget: usize,
    /// Set when an input is constant; `mic` is then 0.
    pub degenerate: bool,
}

/// Grid budget `B(n) = floor(n^0.6)`, never below 4 so a 2x2 grid always fits.
pub fn mic_budget(n: usize) -> usize {
    (((n as f64).powf(MIC_EXPONENT) + 1e-9).floor() as usize).max(4)
}

/// Rank of each element, ties broken by position.
pub fn ordinal_ranks(v: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut rank = vec![0; v.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Row of each point when `n` ranks are split into `bins` near-equal groups.
pub fn equipartition(ranks: &[usize], bins: usize) -> Vec<usize> {
    let n = ranks.len();
    ranks.iter().map(|&r| r * bins / n).collect()
}

fn entropy_of_counts(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

/// `sum_r h_r log2(h_r / m)` for one column's row counts.
fn column_score(h: &[usize]) -> f64 {
    let m: usize = h.iter().sum();
    if m == 0 {
        return 0.0;
    }
    h.iter().filter(|&&c| c > 0).map(|&c| c as f64 * (c as f64 / m as f64).log2()).sum()
}

/// Best mutual information, for each column count `1..=max_cols`, of a
/// partition of the points (taken in `order`) into contiguous columns
/// against the fixed row labels.
fn optimize_axis(order: &[usize], rows: &[usize], n_rows: usize, max_cols: usize, clump_factor: Option<usize>) -> Vec<f64> {
    let n = order.len();
    let labels: Vec<usize> = order.iter().map(|&i| rows[i]).collect();
    // candidate cuts: clump boundaries
    let mut cuts: Vec<usize> = (1..n).filter(|&k| labels[k] != labels[k - 1]).collect();
    if let Some(c) = clump_factor {
        let cap = c * max_cols;
        if cuts.len() + 1 > cap {
            let mut kept = Vec::with_capacity(cap);
            for q in 1..cap {
                let target = q * n / cap;
                let pos = cuts.partition_point(|&k| k < target);
                let pick = [pos.checked_sub(1), Some(pos)]
                    .into_iter()
                    .flatten()
                    .filter(|&p| p < cuts.len())
                    .min_by_key(|&p| cuts[p].abs_diff(target));
                if let Some(p) = pick {
                    if kept.last() != Some(&cuts[p]) {
                        kept.push(cuts[p]);
                    }
                }
            }
            kept.dedup();
            cuts = kept;
        }
    }
    let mut bounds = vec![0];
    bounds.extend(&cuts);
    bounds.push(n);
    let k = bounds.len() - 1;
    // prefix[i][r]: points with row r before bound i
    let mut prefix = vec![vec![0usize; n_rows]; k + 1];
    for i in 0..k {
        let mut next = prefix[i].clone();
        for &l in &labels[bounds[i]..bounds[i + 1]] {
            next[l] += 1;
        }
        prefix[i + 1] = next;
    }
    let mut h = vec![0usize; n_rows];
    let mut score = |i: usize, j: usize| {
        for r in 0..n_rows {
            h[r] = prefix[j][r] - prefix[i][r];
        }
        column_score(&h)
    };
    let mut pair = vec![vec![0.0; k + 1]; k + 1];
    for i in 0..k {
        for j in i + 1..=k {
            pair[i][j] = score(i, j);
        }
    }
    let row_counts = &prefix[k];
    let h_rows = entropy_of_counts(row_counts, n);
    let mut best = vec![f64::NEG_INFINITY; max_cols + 1];
    let mut f: Vec<f64> = (0..=k).map(|j| if j == 0 { f64::NEG_INFINITY } else { pair[0][j] }).collect();
    best[1] = f[k];
    for cols in 2..=max_cols {
        let mut g = vec![f64::NEG_INFINITY; k + 1];
        for j in cols..=k {
            for i in cols - 1..j {
                let v = f[i] + pair[i][j];
                if v > g[j] {
                    g[j] = v;
                }
            }
        }
        f = g;
        best[cols] = f[k].max(best[cols - 1]);
    }
    best.iter().map(|&s| if s.is_finite() { h_rows + s / n as f64 } else { f64::NEG_INFINITY }).collect()
}

/// Maximal information coefficient with the default superclump budget.
pub fn mic(x: &[f64], y: &[f64]) -> Result<MicResult> {
    mic_with(x, y, Some(CLUMP_FACTOR))
}

/// MIC over all grids with `x_bins * y_bins <= B(n)`: one axis is
/// equipartitioned by rank and the other optimized by dynamic programming,
/// in both orientations; `clump_factor = None` disables the superclump
/// approximation.
pub fn mic_with(x: &[f64], y: &[f64], clump_factor: Option<usize>) -> Result<MicResult> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Dimension(format!("mic inputs have lengths {n} and {}", y.len())));
    }
    if n < 8 {
        return Err(Error::InvalidInput(format!("mic needs at least 8 points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mic input".into()));
    }
    let budget = mic_budget(n);
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Ok(MicResult { mic: 0.0, x_bins: 0, y_bins: 0, budget, degenerate: true });
    }
    let rx = ordinal_ranks(x);
    let ry = ordinal_ranks(y);
    let by_rank = |r: &[usize]| {
        let mut order = vec![0; n];
        for (i, &k) in r.iter().enumerate() {
            order[k] = i;
        }
        order
    };
    let (ox, oy) = (by_rank(&rx), by_rank(&ry));
    let mut best = MicResult { mic: 0.0, x_bins: 2, y_bins: 2, budget, degenerate: false };
    let mut consider = |score: f64, a: usize, b: usize| {
        let v = score / (a.min(b) as f64).log2();
        if v > best.mic + 1e-15 {
            best.mic = v;
            best.x_bins = a;
            best.y_bins = b;
        }
    };
    for fixed in 2..=budget / 2 {
        let max_other = budget / fixed;
        // y equipartitioned into `fixed` rows, x optimized
        let rows = equipartition(&ry, fixed);
        let scores = optimize_axis(&ox, &rows, fixed, max_other, clump_factor);
        for (a, &s) in scores.iter().enumerate().skip(2) {
            consider(s, a, fixed);
        }
        // x equipartitioned into `fixed` columns, y optimized
        let cols = equipartition(&rx, fixed);
        let scores = optimize_axis(&oy, &cols, fixed, max_other, clump_factor);
        for (b, &s) in scores.iter().enumerate().skip(2) {
            consider(s, fixed, b);
        }
    }
    best.mic = best.mic.clamp(0.0, 1.0);
    Ok(best)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("inputs have lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("correlation needs at least 2 points".into()));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::InvalidInput("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks from 1, tied values sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Source indices of one moving-block bootstrap replicate.
pub fn block_bootstrap_indices(n: usize, block: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if block == 0 || n < block {
        return Err(Error::InvalidInput(format!("series of length {n} is shorter than block {block}")));
    }
    let mut out = Vec::with_capacity(n.div_ceil(block) * block);
    while out.len() < n {
        let start = rng.random_range(0..=n - block);
        out.extend(start..start + block);
    }
    out.truncate(n);
    Ok(out)
}

pub fn moving_block_bootstrap(series: &[f64], block: usize, n_boot: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_boot)
        .map(|_| Ok(block_bootstrap_indices(series.len(), block, &mut rng)?.into_iter().map(|i| series[i]).collect()))
        .collect()
}

/// Per-cell mean MIC between `target` and `predictor` (both `n x G`) over
/// paired moving-block bootstrap replicates.
pub fn mic_map(target: ArrayView2<'_, f64>, predictor: ArrayView2<'_, f64>, n_boot: usize, block: usize, seed: u64) -> Result<Vec<f64>> {
    if target.dim() != predictor.dim() {
        return Err(Error::Dimension(format!("target {:?} vs predictor {:?}", target.dim(), predictor.dim())));
    }
    if n_boot == 0 {
        return Err(Error::InvalidInput("n_boot must be positive".into()));
    }
    let n = target.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let replicates: Vec<Vec<usize>> = (0..n_boot).map(|_| block_bootstrap_indices(n, block, &mut rng)).collect::<Result<_>>()?;
    (0..target.ncols())
        .into_par_iter()
        .map(|c| {
            let (y, x) = (target.column(c), predictor.column(c));
            let mut total = 0.0;
            for idx in &replicates {
                let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
                let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                total += mic(&xs, &ys)?.mic;
            }
            Ok(total / n_boot as f64)
        })
        .collect()
}

/// Per-cell correlation between two `n x G` arrays; constant cells give 0.
pub fn correlation_map(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, rank: bool) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok((0..a.ncols())
        .map(|c| {
            let (x, y) = (a.column(c).to_vec(), b.column(c).to_vec());
            let r = if rank { spearman(&x, &y) } else { pearson(&x, &y) };
            r.unwrap_or(0.0)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceMethod {
    Gain,
    NonzeroCount,
    Shapley,
}

impl fmt::Display for ImportanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImportanceMethod::Gain => "gain",
            ImportanceMethod::NonzeroCount => "nonzero-count",
            ImportanceMethod::Shapley => "shapley",
        })
    }
}

/// One score per feature group (eight variable PC blocks, then the index block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub method: ImportanceMethod,
    pub groups: Vec<String>,
    pub scores: Vec<f64>,
}

impl ImportanceTable {
    pub fn new(method: ImportanceMethod, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != N_GROUPS || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("need {N_GROUPS} finite group scores")));
        }
        Ok(Self { method, groups: group_names(), scores })
    }

    /// Highest-scoring group; the earliest group wins ties.
    pub fn top_group(&self) -> usize {
        let mut best = 0;
        for (g, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = g;
            }
        }
        best
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["group", "score", "method"])?;
        for (g, s) in self.groups.iter().zip(&self.scores) {
            w.write_record([g.clone(), s.to_string(), self.method.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn average_tables(method: ImportanceMethod, per_model: Vec<Vec<f64>>) -> Result<ImportanceTable> {
    if per_model.is_empty() {
        return Err(Error::Empty("no models".into()));
    }
    let mut scores = vec![0.0; N_GROUPS];
    for m in &per_model {
        for (s, v) in scores.iter_mut().zip(m) {
            *s += v / per_model.len() as f64;
        }
    }
    ImportanceTable::new(method, scores)
}

/// Number of non-zero coefficient rows per group, averaged over models.
pub fn nonzero_importance(models: &[MultitaskLassoModel]) -> Result<ImportanceTable> {
    let per_model = models
        .iter()
        .map(|m| {
            let mut counts = vec![0.0; N_GROUPS];
            for (j, nz) in m.nonzero_rows().into_iter().enumerate() {
                if nz {
                    counts[column_group(j)] += 1.0;
                }
            }
            counts
        })
        .collect();
    average_tables(ImportanceMethod::NonzeroCount, per_model)
}

/// Total split gain per group, averaged over the per-cell ensembles of a
/// model and then over models.
pub fn gain_group_importance(models: &[Vec<TreeEnsemble>]) -> Result<ImportanceTable> {
    let per_model = models
        .iter()
        .map(|ensembles| {
            let mut total = vec![0.0; N_GROUPS];
            for e in ensembles {
                for (f, g) in e.trees.iter().flat_map(|t| t.splits()) {
                    total[column_group(f)] += g / ensembles.len().max(1) as f64;
                }
            }
            total
        })
        .collect();
    average_tables(ImportanceMethod::Gain, per_model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub values: Vec<f64>,
    /// Subsets (as bit masks) whose evaluation failed, with the error text.
    pub failures: Vec<(u32, String)>,
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

pub const MAX_EXACT_GROUPS: usize = 12;

/// Exact Shapley values of `n` players under the set function `f`, given as
/// a function of the coalition bit mask. A failed coalition drops every
/// marginal difference that involves it.
pub fn shapley_exact<F>(n: usize, f: F) -> Result<ShapleyResult>
where
    F: Fn(u32) -> Result<f64> + Sync,
{
    if n == 0 || n > MAX_EXACT_GROUPS {
        return Err(Error::InvalidInput(format!("exact Shapley supports 1..={MAX_EXACT_GROUPS} groups, got {n}")));
    }
    let evals: Vec<Result<f64>> = (0..1u32 << n).into_par_iter().map(&f).collect();
    let mut failures = Vec::new();
    let value: Vec<Option<f64>> = evals
        .into_iter()
        .enumerate()
        .map(|(s, r)| match r {
            Ok(v) if v.is_finite() => Some(v),
            Ok(v) => {
                failures.push((s as u32, format!("non-finite skill {v}")));
                None
            }
            Err(e) => {
                failures.push((s as u32, e.to_string()));
                None
            }
        })
        .collect();
    let weight: Vec<f64> = (0..n).map(|s| factorial(s) * factorial(n - s - 1) / factorial(n)).collect();
    let mut values = vec![0.0; n];
    for (j, v) in values.iter_mut().enumerate() {
        let bit = 1u32 << j;
        for s in (0..1u32 << n).filter(|s| s & bit == 0) {
            if let (Some(with), Some(without)) = (value[(s | bit) as usize], value[s as usize]) {
                *v += weight[s.count_ones() as usize] * (with - without);
            }
        }
    }
    Ok(ShapleyResult { values, failures })
}

/// Monte Carlo Shapley values: mean marginal contribution over seeded random
/// orderings of the players.
pub fn shapley_monte_carlo<F>(n: usize, f: F, n_perm: usize, seed: u64) -> Result<ShapleyResult>
where
    F: Fn(u32) -> Result<f64>,
{
    if n == 0 || n > 31 || n_perm == 0 {
        return Err(Error::InvalidInput("need 1..=31 players and at least one permutation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<u32, Option<f64>> = HashMap::new();
    let mut failures = Vec::new();
    let mut eval = |s: u32, failures: &mut Vec<(u32, String)>| -> Option<f64> {
        *cache.entry(s).or_insert_with(|| match f(s) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(v) => {
                failures.push((s, format!("non-finite skill {v}")));
                None
            }
            Err(e) => {
                failures.push((s, e.to_string()));
                None
            }
        })
    };
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..n_perm {
        order.shuffle(&mut rng);
        let mut s = 0u32;
        let mut prev = eval(s, &mut failures);
        for &j in &order {
            let next_set = s | (1 << j);
            let next = eval(next_set, &mut failures);
            if let (Some(a), Some(b)) = (next, prev) {
                sums[j] += a - b;
                counts[j] += 1;
            }
            s = next_set;
            prev = next;
        }
    }
    let values = sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    Ok(ShapleyResult { values, failures })
}

/// Model refitted on each coalition of feature groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapleyModel {
    /// Fixed penalty on the standardized scale.
    Lasso { lambda: f64 },
    Gbt { params: GbtParams },
}

/// Training design and validation folds for coalition refits.
#[derive(Clone, Debug)]
pub struct GroupedData {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub validation: Vec<(Array2<f64>, Array2<f64>)>,
}

fn mean_skill(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    let mut s = 0.0;
    for (p, t) in pred.rows().into_iter().zip(truth.rows()) {
        s += spatial_skill(p, t)?;
    }
    Ok(s / truth.nrows().max(1) as f64)
}

fn columns_of(mask: u32, width: usize) -> Vec<usize> {
    (0..width).filter(|&j| mask & (1 << column_group(j)) != 0).collect()
}

/// Mean validation skill (mean over folds of mean spatial cosine) of the
/// model refitted on the columns of the groups in `mask`. The empty
/// coalition predicts the training mean.
pub fn coalition_skill(model: &ShapleyModel, data: &GroupedData, mask: u32) -> Result<f64> {
    let cols = columns_of(mask, data.x.ncols());
    let mean: Array1<f64> = data.y.mean_axis(Axis(0)).ok_or_else(|| Error::Empty("no training rows".into()))?;
    let mut total = 0.0;
    if cols.is_empty() {
        for (_, vy) in &data.validation {
            let pred = Array2::from_shape_fn(vy.dim(), |(_, k)| mean[k]);
            total += mean_skill(&pred, vy)?;
        }
        return Ok(total / data.validation.len().max(1) as f64);
    }
    let x = data.x.select(Axis(1), &cols);
    let predict: Box<dyn Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>> = match model {
        ShapleyModel::Lasso { lambda } => {
            let problem = LassoProblem::new(x.view(), data.y.view())?;
            let fitted = problem.fit(*lambda, None, &LassoOptions::default())?;
            Box::new(move |v| fitted.predict(v))
        }
        ShapleyModel::Gbt { params } => {
            let ens = fit_gbt_multi(x.view(), data.y.view(), params, |_, _| true)?;
            Box::new(move |v| predict_multi(&ens, v))
        }
    };
    for (vx, vy) in &data.validation {
        let pred = predict(vx.select(Axis(1), &cols).view())?;
        total += mean_skill(&pred, vy)?;
    }
    Ok(total / data.validation.len().max(1) as f64)
}

/// Grouped Shapley importance over the nine feature groups.
pub fn shapley_groups(model: &ShapleyModel, data: &GroupedData, exact: bool, n_perm: usize, seed: u64) -> Result<(ImportanceTable, ShapleyResult)> {
    let f = |mask: u32| coalition_skill(model, data, mask);
    let result = if exact { shapley_exact(N_GROUPS, f)? } else { shapley_monte_carlo(N_GROUPS, f, n_perm, seed)? };
    Ok((ImportanceTable::new(ImportanceMethod::Shapley, result.values.clone())?, result))
}

/// MIC between two series given as views, for callers holding arrays.
pub fn mic_views(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<MicResult> {
    mic(&x.to_vec(), &y.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Mutual information of a contingency table given by point labels.
    fn mutual_information(cols: &[usize], rows: &[usize], nc: usize, nr: usize) -> f64 {
        let n = cols.len() as f64;
        let mut joint = vec![vec![0.0; nr]; nc];
        let mut pc = vec![0.0; nc];
        let mut pr = vec![0.0; nr];
        for (&c, &r) in cols.iter().zip(rows) {
            joint[c][r] += 1.0 / n;
            pc[c] += 1.0 / n;
            pr[r] += 1.0 / n;
        }
        let mut mi = 0.0;
        for c in 0..nc {
            for r in 0..nr {
                if joint[c][r] > 0.0 {
                    mi += joint[c][r] * (joint[c][r] / (pc[c] * pr[r])).log2();
                }
            }
        }
        mi
    }

    /// Exhaustive search: every set of at most `a - 1` cut positions on the
    /// optimized axis, for every admissible grid and both orientations.
    fn brute_force_mic(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len();
        let budget = mic_budget(n);
        let (rx, ry) = (ordinal_ranks(x), ordinal_ranks(y));
        let mut best: f64 = 0.0;
        for (free, fixed_ranks) in [(&rx, &ry), (&ry, &rx)] {
            for fixed in 2..=budget / 2 {
                let rows = equipartition(fixed_ranks, fixed);
                for other in 2..=budget / fixed {
                    for mask in 0u32..(1 << (n - 1)) {
                        let n_cuts = mask.count_ones() as usize;
                        if n_cuts + 1 > other {
                            continue;
                        }
                        let cols: Vec<usize> =
                            free.iter().map(|&r| (0..r).filter(|&k| mask & (1 << k) != 0).count()).collect();
                        let mi = mutual_information(&cols, &rows, n_cuts + 1, fixed);
                        best = best.max(mi / (fixed.min(other) as f64).log2());
                    }
                }
            }
        }
        best.min(1.0)
    }

    #[test]
    fn budget_values() {
        assert_eq!(mic_budget(10), 4);
        assert_eq!(mic_budget(200), 24);
        assert_eq!(mic_budget(32), 8);
    }

    #[test]
    fn identity_saturates() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 10.0 + i as f64).collect();
        assert_abs_diff_eq!(mic(&x, &x).unwrap().mic, 1.0, epsilon = 1e-12);
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_abs_diff_eq!(mic(&x, &x).unwrap().mic, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_brute_force_for_small_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let x: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let fast = mic(&x, &y).unwrap().mic;
            assert_abs_diff_eq!(fast, brute_force_mic(&x, &y), epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_input_is_degenerate() {
        let x = vec![1.0; 12];
        let y: Vec<f64> = (0..12).map(f64::from).collect();
        let r = mic(&x, &y).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.mic, 0.0);
        assert!(mic(&y[..5], &y[..5]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn mic_symmetric_and_rank_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..40).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = x.iter().map(|v: &f64| v * v + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            let a = mic(&x, &y).unwrap();
            let b = mic(&y, &x).unwrap();
            prop_assert!((a.mic - b.mic).abs() < 1e-12);
            prop_assert!(a.x_bins * a.y_bins <= a.budget);
            let tx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let ty: Vec<f64> = y.iter().map(|v| v * v * v + 2.0).collect();
            prop_assert!((mic(&tx, &ty).unwrap().mic - a.mic).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_noise_below_null_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let observed = mic(&x, &y).unwrap().mic;
        let mut null: Vec<f64> = (0..200)
            .map(|_| {
                let mut p = y.clone();
                p.shuffle(&mut rng);
                mic(&x, &p).unwrap().mic
            })
            .collect();
        null.sort_by(f64::total_cmp);
        assert!(observed < crate::evalkit::quantile_sorted(&null, 0.95));
    }

    #[test]
    fn correlations() {
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0, epsilon = 1e-15);
        // x deviations (-1, 0, 1), y deviations (-4/3, -1/3, 5/3): 3 / sqrt(2 * 14/3)
        let expected = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), expected, epsilon = 1e-15);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let x = [0.3, -1.0, 2.5, 0.7, 1.1];
        let y = [1.0, 0.2, 0.1, 3.0, -2.0];
        let tx: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        assert_abs_diff_eq!(spearman(&x, &y).unwrap(), spearman(&tx, &y).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn block_bootstrap_properties() {
        let s: Vec<f64> = (0..400).map(f64::from).collect();
        for r in moving_block_bootstrap(&s, 400, 5, 1).unwrap() {
            assert_eq!(r, s);
        }
        let a = moving_block_bootstrap(&s, 50, 20, 9).unwrap();
        assert!(a.iter().all(|r| r.len() == 400));
        assert_eq!(a, moving_block_bootstrap(&s, 50, 20, 9).unwrap());
        assert!(moving_block_bootstrap(&s[..10], 50, 1, 0).is_err());
        // every block is a contiguous run of the source
        for r in &a {
            for chunk in r.chunks(50) {
                assert!(chunk.windows(2).all(|w| w[1] == w[0] + 1.0));
            }
        }
    }

    #[test]
    fn bootstrap_mean_tracks_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..730).map(|_| rng.sample(StandardNormal)).collect();
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let se = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        let reps = moving_block_bootstrap(&s, 365, 1000, 4).unwrap();
        let m = reps.iter().map(|r| r.iter().sum::<f64>() / n).sum::<f64>() / reps.len() as f64;
        assert!((m - mean).abs() < 3.0 * se);
    }

    #[test]
    fn mic_map_identity_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Array2::from_shape_fn((400, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let mut p = Array2::from_shape_fn((400, 3), |_| rng.sample::<f64, _>(StandardNormal));
        p.column_mut(1).assign(&t.column(1));
        let m = mic_map(t.view(), p.view(), 5, 365, 2).unwrap();
        assert_abs_diff_eq!(m[1], 1.0, epsilon = 1e-12);
        assert!(m[0] < 0.2 && m[2] < 0.2);
        assert_eq!(m, mic_map(t.view(), p.view(), 5, 365, 2).unwrap());
    }

    #[test]
    fn shapley_axioms_on_stubs() {
        let v = [0.3, -0.1, 0.0, 0.25, 0.05, 0.0, 0.4, 0.0, 0.1];
        let additive = |s: u32| Ok((0..9).filter(|j| s & (1 << j) != 0).map(|j| v[j]).sum::<f64>());
        let r = shapley_exact(9, additive).unwrap();
        for j in 0..9 {
            assert_abs_diff_eq!(r.values[j], v[j], epsilon = 1e-12);
        }
        let constant = |_: u32| Ok(0.7);
        assert!(shapley_exact(9, constant).unwrap().values.iter().all(|&x| x.abs() < 1e-15));
        // interaction game: groups 0 and 1 only count together; 8 is a dummy
        let game = |s: u32| Ok(f64::from(u8::from(s & 3 == 3)) + 0.5 * f64::from((s >> 2 & 1) as u8) * f64::from((s >> 5 & 1) as u8));
        let r = shapley_exact(9, game).unwrap();
        let total: f64 = r.values.iter().sum();
        assert_abs_diff_eq!(total, game(511).unwrap() - game(0).unwrap(), epsilon = 1e-9);
        assert_abs_diff_eq!(r.values[0], r.values[1], epsilon = 1e-12);
        assert_abs_diff_eq!(r.values[8], 0.0, epsilon = 1e-15);
        let mc = shapley_monte_carlo(9, game, 2000, 1).unwrap();
        assert_abs_diff_eq!(mc.values[0], 0.5, epsilon = 0.05);
        assert_abs_diff_eq!(mc.values.iter().sum::<f64>(), 1.5, epsilon = 1e-9);
    }

    #[test]
    fn shapley_skips_failed_coalitions() {
        let f = |s: u32| if s == 0b11 { Err(Error::Numerical("stub".into())) } else { Ok(f64::from(s.count_ones())) };
        let r = shapley_exact(3, f).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert!(r.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn importance_tables() {
        let coef = Array2::zeros((88, 2));
        let model = MultitaskLassoModel {
            coef: coef.clone(),
            intercept: Array1::zeros(2),
            lambda: 1.0,
            scaling: crate::linmodels::Standardizer { mean: Array1::zeros(88), scale: Array1::ones(88) },
            sweeps: 0,
            kkt_residual: 0.0,
            objective: vec![],
        };
        let t = nonzero_importance(std::slice::from_ref(&model)).unwrap();
        assert!(t.scores.iter().all(|&s| s == 0.0));
        let mut one = model.clone();
        one.coef[[35, 1]] = 0.2;
        let t = nonzero_importance(&[one]).unwrap();
        assert_eq!(t.scores[3], 1.0);
        assert_eq!(t.scores.iter().sum::<f64>(), 1.0);
        assert_eq!(t.top_group(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imp.csv");
        t.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("group,score,method\n"));
        assert_eq!(text.lines().count(), 10);
    }
}
