//! Monthly evaluation driver: per split plan, tune on the validation folds,
//! refit on the final training range and score the test dates.

use std::fmt;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_report, spatial_skill, PlanFailure, SkillReport};
use crate::climatology::{TargetSeries, TARGET_HORIZON};
use crate::deepnet::{new_fnn, train, EncDec, Net, TrainConfig, ValidationSet, Wiring};
use crate::error::{Error, Result};
use crate::features::{
    FeatureMode, ForecastData, PcScaler, Scope, SplitPlan, FEATURES_PER_DATE, INDICES, PCS_PER_VARIABLE,
    VARIABLES,
};
use crate::gbt::{fit_gbt_multi, predict_multi, GbtParams, TreeEnsemble};
use crate::linmodels::{
    fit_autoknn, fit_damped_persistence, fit_ls_indices, fit_multillr, predict_linear, AutoKnnConfig, LassoOptions,
    LassoProblem, MultiLlrConfig, MultitaskLassoModel,
};
use crate::timegrid::{Date, DateRange};

/// Latest observation date any fitted target depended on, per plan phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanAudit {
    pub plan: String,
    pub phase: String,
    pub latest_dependency: Option<Date>,
    pub first_eval: Date,
    pub ok: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lasso,
    Gbt,
    Autoknn,
    Multillr,
    Damped,
    LsIndices,
    Fnn,
    Encdec,
    EncdecLast,
    Climatology,
    /// Returns the truth; a metric sanity check.
    Oracle,
    /// Lasso fitted on permuted training targets.
    Shuffled,
}

impl ModelKind {
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Lasso => "lasso",
            ModelKind::Gbt => "gbt",
            ModelKind::Autoknn => "autoknn",
            ModelKind::Multillr => "multillr",
            ModelKind::Damped => "damped",
            ModelKind::LsIndices => "ls-indices",
            ModelKind::Fnn => "fnn",
            ModelKind::Encdec => "encdec",
            ModelKind::EncdecLast => "encdec-last",
            ModelKind::Climatology => "climatology",
            ModelKind::Oracle => "oracle",
            ModelKind::Shuffled => "shuffled",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    Global,
    Local,
}

impl ScopeKind {
    pub fn for_month(self, month: u32) -> Scope {
        match self {
            ScopeKind::Global => Scope::Global,
            ScopeKind::Local => Scope::Local { month },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoTuning {
    /// Candidate penalties are `n_lambdas` log-spaced ratios of each
    /// training set's `lambda_max`, from 1 down to `min_ratio`.
    pub n_lambdas: usize,
    pub min_ratio: f64,
    pub options: LassoOptions,
}

impl Default for LassoTuning {
    fn default() -> Self {
        Self { n_lambdas: 20, min_ratio: 1e-3, options: LassoOptions::default() }
    }
}

impl LassoTuning {
    pub fn ratios(&self) -> Vec<f64> {
        let n = self.n_lambdas.max(1);
        (0..n)
            .map(|i| if n == 1 { 1.0 } else { self.min_ratio.powf(i as f64 / (n - 1) as f64) })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtTuning {
    /// `n_rounds` is the upper bound searched on the folds.
    pub params: GbtParams,
    pub patience: usize,
}

impl Default for GbtTuning {
    fn default() -> Self {
        Self { params: GbtParams::default(), patience: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnTuning {
    pub base: AutoKnnConfig,
    pub k_grid: Vec<usize>,
    /// Validation dates are thinned to every `validation_step`-th day.
    pub validation_step: usize,
}

impl Default for KnnTuning {
    fn default() -> Self {
        Self { base: AutoKnnConfig::default(), k_grid: vec![5, 10, 20, 40], validation_step: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepConfig {
    pub hidden: usize,
    pub layers: usize,
    pub decoder_hidden: usize,
    pub fnn_hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for DeepConfig {
    fn default() -> Self {
        Self { hidden: 32, layers: 1, decoder_hidden: 128, fnn_hidden: vec![128, 64], train: TrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelKind,
    pub mode: FeatureMode,
    pub scope: ScopeKind,
    pub seed: u64,
    /// Keep every `train_stride`-th valid training date.
    pub train_stride: usize,
    pub lasso: LassoTuning,
    pub gbt: GbtTuning,
    pub knn: KnnTuning,
    pub multillr: MultiLlrConfig,
    pub deep: DeepConfig,
}

impl PipelineConfig {
    pub fn new(model: ModelKind, mode: FeatureMode) -> Self {
        Self {
            model,
            mode,
            scope: ScopeKind::Global,
            seed: 0,
            train_stride: 1,
            lasso: LassoTuning::default(),
            gbt: GbtTuning::default(),
            knn: KnnTuning::default(),
            multillr: MultiLlrConfig::default(),
            deep: DeepConfig::default(),
        }
    }
}

/// Predictions for one plan's test dates.
#[derive(Clone, Debug)]
struct PlanOutcome {
    dates: Vec<Date>,
    pred: Array2<f64>,
    truth: Array2<f64>,
    baseline: Array2<f64>,
    audit: Vec<PlanAudit>,
    tuned: String,
}

/// Training and evaluation dates of one phase (a fold or the final refit).
#[derive(Clone, Debug)]
struct Phase {
    name: String,
    range: DateRange,
    train: Vec<Date>,
    eval: Vec<Date>,
}

impl Phase {
    fn audit(&self, plan: &str, latest_target: Option<Date>) -> PlanAudit {
        let latest_dependency = latest_target.map(|d| d.add_days(TARGET_HORIZON));
        let first_eval = self.eval.iter().copied().min().expect("phase has evaluation dates");
        let ok = latest_dependency.is_none_or(|d| d < first_eval);
        PlanAudit { plan: plan.to_string(), phase: self.name.clone(), latest_dependency, first_eval, ok }
    }
}

struct Context<'a> {
    data: &'a ForecastData,
    cfg: &'a PipelineConfig,
    plan: &'a SplitPlan,
    plan_index: usize,
    folds: Vec<Phase>,
    last: Phase,
}

fn usable_dates(data: &ForecastData, range: DateRange, mode: FeatureMode, scope: Scope, stride: usize) -> Vec<Date> {
    data.valid_dates(range, mode)
        .into_iter()
        .filter(|&d| scope.admits(d))
        .step_by(stride.max(1))
        .collect()
}

fn eval_dates(data: &ForecastData, dates: &[Date], mode: FeatureMode, what: &str) -> Result<Vec<Date>> {
    if let Some(&d) = dates.iter().find(|&&d| !data.is_valid(d, mode)) {
        return Err(Error::OutOfRange { date: d.to_string(), context: format!("{what} inputs ({mode})") });
    }
    Ok(dates.to_vec())
}

impl<'a> Context<'a> {
    fn new(data: &'a ForecastData, cfg: &'a PipelineConfig, plan: &'a SplitPlan, plan_index: usize) -> Result<Self> {
        let scope = cfg.scope.for_month(plan.test_month.1);
        let make = |name: String, range: DateRange, eval: Vec<Date>| -> Result<Phase> {
            let train = usable_dates(data, range, cfg.mode, scope, cfg.train_stride);
            if train.len() < 2 {
                return Err(Error::InsufficientHistory(format!("{name}: {} usable training dates", train.len())));
            }
            Ok(Phase { name, range, train, eval })
        };
        let mut folds = Vec::new();
        for (i, f) in plan.folds.iter().enumerate() {
            let eval = eval_dates(data, &f.validation, cfg.mode, "validation")?;
            folds.push(make(format!("fold{}", i + 1), f.train, eval)?);
        }
        let test = eval_dates(data, &plan.test_dates, cfg.mode, "test")?;
        let last = make("final".into(), plan.final_train, test)?;
        Ok(Self { data, cfg, plan, plan_index, folds, last })
    }

    fn seed(&self) -> u64 {
        self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(self.plan_index as u64)
    }

    fn design(&self, dates: &[Date]) -> Result<Array2<f64>> {
        self.data.design(dates, self.cfg.mode)
    }

    fn targets(&self, dates: &[Date]) -> Result<Array2<f64>> {
        self.data.target_rows(dates)
    }

    fn audit(&self, phase: &Phase) -> Result<PlanAudit> {
        let a = phase.audit(&self.plan.id(), phase.train.iter().copied().max());
        if !a.ok {
            return Err(Error::InvalidInput(format!("{} {}: training depends on data after evaluation starts", a.plan, a.phase)));
        }
        Ok(a)
    }

    fn all_audits(&self, with_folds: bool) -> Result<Vec<PlanAudit>> {
        let mut out = Vec::new();
        if with_folds {
            for f in &self.folds {
                out.push(self.audit(f)?);
            }
        }
        out.push(self.audit(&self.last)?);
        Ok(out)
    }
}

fn mean_spatial(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    let mut total = 0.0;
    for (p, t) in pred.rows().into_iter().zip(truth.rows()) {
        total += spatial_skill(p, t)?;
    }
    Ok(total / truth.nrows().max(1) as f64)
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-cell, per-day-of-year mean of the targets in `range`, falling back to
/// the cell mean for days of year without training rows.
pub fn training_baseline(targets: &TargetSeries, range: DateRange, eval: &[Date]) -> Result<Array2<f64>> {
    let g = targets.n_cells();
    let mut sums = Array2::<f64>::zeros((366, g));
    let mut counts = vec![0usize; 366];
    let mut total = Array1::<f64>::zeros(g);
    let mut n = 0usize;
    for d in range.iter() {
        if let Some(row) = targets.row(d) {
            let k = d.day_of_year() as usize;
            sums.row_mut(k).scaled_add(1.0, &row);
            counts[k] += 1;
            total += &row;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty(format!("no training targets in {}..{}", range.start, range.end)));
    }
    let mut out = Array2::zeros((eval.len(), g));
    for (i, d) in eval.iter().enumerate() {
        let k = d.day_of_year() as usize;
        if counts[k] > 0 {
            out.row_mut(i).assign(&(&sums.row(k) / counts[k] as f64));
        } else {
            out.row_mut(i).assign(&(&total / n as f64));
        }
    }
    Ok(out)
}

fn lasso_path(x: &Array2<f64>, y: &Array2<f64>, ratios: &[f64], opts: &LassoOptions) -> Result<Vec<MultitaskLassoModel>> {
    let problem = LassoProblem::new(x.view(), y.view())?;
    let lmax = problem.lambda_max();
    let lambdas: Vec<f64> = ratios.iter().map(|r| r * lmax).collect();
    problem.fit_path(&lambdas, opts)
}

fn permuted(y: &Array2<f64>, seed: u64) -> Array2<f64> {
    let mut order: Vec<usize> = (0..y.nrows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    y.select(Axis(0), &order)
}

/// Ratio chosen on the folds and the model refitted on the final range.
fn tune_lasso(ctx: &Context<'_>, shuffle: bool) -> Result<(MultitaskLassoModel, f64)> {
    let tuning = &ctx.cfg.lasso;
    let ratios = tuning.ratios();
    let labels = |y: Array2<f64>, salt: u64| if shuffle { permuted(&y, ctx.seed() ^ salt) } else { y };
    let mut skill = vec![0.0; ratios.len()];
    for (fi, fold) in ctx.folds.iter().enumerate() {
        let x = ctx.design(&fold.train)?;
        let y = labels(ctx.targets(&fold.train)?, fi as u64 + 1);
        let xv = ctx.design(&fold.eval)?;
        let yv = ctx.targets(&fold.eval)?;
        for (i, m) in lasso_path(&x, &y, &ratios, &tuning.options)?.iter_mut().enumerate() {
            if shuffle {
                m.intercept.fill(0.0);
            }
            skill[i] += mean_spatial(m.predict(xv.view())?.view(), yv.view())? / ctx.folds.len() as f64;
        }
    }
    let best = argmax_first(&skill);
    let x = ctx.design(&ctx.last.train)?;
    let y = labels(ctx.targets(&ctx.last.train)?, 0);
    let mut model = lasso_path(&x, &y, &ratios[..=best], &tuning.options)?.pop().expect("non-empty path");
    if shuffle {
        // the training-mean pattern is not a function of the features; score only the fitted part
        model.intercept.fill(0.0);
    }
    Ok((model, ratios[best]))
}

fn run_lasso(ctx: &Context<'_>, shuffle: bool) -> Result<(Array2<f64>, String)> {
    let (model, ratio) = tune_lasso(ctx, shuffle)?;
    let pred = model.predict(ctx.design(&ctx.last.eval)?.view())?;
    Ok((pred, format!("lambda_ratio={ratio:.6e}")))
}

/// Round count chosen on the folds and the ensembles refitted on the final range.
fn tune_gbt(ctx: &Context<'_>) -> Result<(Vec<TreeEnsemble>, usize)> {
    let tuning = &ctx.cfg.gbt;
    let params = GbtParams { seed: ctx.seed(), ..tuning.params };
    let mut curves: Vec<Vec<f64>> = Vec::new();
    for fold in &ctx.folds {
        let x = ctx.design(&fold.train)?;
        let y = ctx.targets(&fold.train)?;
        let xv = ctx.design(&fold.eval)?;
        let yv = ctx.targets(&fold.eval)?;
        let mut staged: Option<Array2<f64>> = None;
        let mut curve = Vec::new();
        let mut failure = None;
        fit_gbt_multi(x.view(), y.view(), &params, |round, ens| {
            let pv = staged.get_or_insert_with(|| Array2::from_shape_fn((xv.nrows(), ens.len()), |(_, k)| ens[k].base_score));
            for (k, e) in ens.iter().enumerate() {
                match e.tree_output(round - 1, xv.view()) {
                    Ok(out) => pv.column_mut(k).scaled_add(1.0, &out),
                    Err(err) => {
                        failure = Some(err);
                        return false;
                    }
                }
            }
            match mean_spatial(pv.view(), yv.view()) {
                Ok(s) => curve.push(s),
                Err(err) => {
                    failure = Some(err);
                    return false;
                }
            }
            let best = argmax_first(&curve);
            curve.len() - 1 - best < tuning.patience
        })?;
        if let Some(err) = failure {
            return Err(err);
        }
        curves.push(curve);
    }
    let longest = curves.iter().map(Vec::len).max().unwrap_or(0);
    let n_rounds = if longest == 0 {
        params.n_rounds
    } else {
        let mean: Vec<f64> = (0..longest)
            .map(|r| curves.iter().map(|c| c[r.min(c.len() - 1)]).sum::<f64>() / curves.len() as f64)
            .collect();
        argmax_first(&mean) + 1
    };
    let x = ctx.design(&ctx.last.train)?;
    let y = ctx.targets(&ctx.last.train)?;
    let ens = fit_gbt_multi(x.view(), y.view(), &GbtParams { n_rounds, ..params }, |_, _| true)?;
    Ok((ens, n_rounds))
}

fn run_gbt(ctx: &Context<'_>) -> Result<(Array2<f64>, String)> {
    let (ens, n_rounds) = tune_gbt(ctx)?;
    let pred = predict_multi(&ens, ctx.design(&ctx.last.eval)?.view())?;
    Ok((pred, format!("n_rounds={n_rounds}")))
}

/// Tuned multitask Lasso of one plan (fitted on its final training range)
/// and the chosen penalty ratio.
pub fn plan_lasso(data: &ForecastData, cfg: &PipelineConfig, plan: &SplitPlan, plan_index: usize) -> Result<(MultitaskLassoModel, f64)> {
    plan.check_leakage()?;
    tune_lasso(&Context::new(data, cfg, plan, plan_index)?, false)
}

/// Tuned per-cell boosted ensembles of one plan and the chosen round count.
pub fn plan_gbt(data: &ForecastData, cfg: &PipelineConfig, plan: &SplitPlan, plan_index: usize) -> Result<(Vec<TreeEnsemble>, usize)> {
    plan.check_leakage()?;
    tune_gbt(&Context::new(data, cfg, plan, plan_index)?)
}

/// Training design, training targets, validation design and validation
/// targets of fold `fold` of a plan.
pub fn fold_designs(
    data: &ForecastData,
    cfg: &PipelineConfig,
    plan: &SplitPlan,
    fold: usize,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> {
    let ctx = Context::new(data, cfg, plan, 0)?;
    let f = ctx.folds.get(fold).ok_or_else(|| Error::InvalidInput(format!("plan {} has no fold {fold}", plan.id())))?;
    Ok((ctx.design(&f.train)?, ctx.targets(&f.train)?, ctx.design(&f.eval)?, ctx.targets(&f.eval)?))
}

/// Target series restricted to dates before `end`.
fn truncate(series: &TargetSeries, end: Date) -> TargetSeries {
    let n = end.days_since(series.start).clamp(0, series.values.nrows() as i64) as usize;
    TargetSeries { start: series.start, cells: series.cells.clone(), values: series.values.slice(s![..n, ..]).to_owned() }
}

fn knn_predict(ctx: &Context<'_>, phase: &Phase, eval: &[Date], k: usize) -> Result<Array2<f64>> {
    let visible = truncate(&ctx.data.targets, phase.range.end);
    let cfg = AutoKnnConfig { k, ..ctx.cfg.knn.base };
    let mut out = Array2::zeros((eval.len(), visible.n_cells()));
    for (i, &t) in eval.iter().enumerate() {
        let (_, pred) = fit_autoknn(&visible, phase.range, t, &cfg)?;
        out.row_mut(i).assign(&pred);
    }
    Ok(out)
}

fn run_autoknn(ctx: &Context<'_>) -> Result<(Array2<f64>, String)> {
    let tuning = &ctx.cfg.knn;
    if tuning.k_grid.is_empty() {
        return Err(Error::InvalidInput("empty k grid".into()));
    }
    let mut skill = vec![0.0; tuning.k_grid.len()];
    for fold in &ctx.folds {
        let eval: Vec<Date> = fold.eval.iter().copied().step_by(tuning.validation_step.max(1)).collect();
        let yv = ctx.targets(&eval)?;
        for (i, &k) in tuning.k_grid.iter().enumerate() {
            let pred = knn_predict(ctx, fold, &eval, k)?;
            skill[i] += mean_spatial(pred.view(), yv.view())? / ctx.folds.len() as f64;
        }
    }
    let k = tuning.k_grid[argmax_first(&skill)];
    let pred = knn_predict(ctx, &ctx.last, &ctx.last.eval, k)?;
    Ok((pred, format!("k={k}")))
}

/// Candidate predictors: the recent anomaly, each index and the first PC of
/// each variable, the latter two repeated across cells.
pub fn multillr_candidates(data: &ForecastData, dates: &[Date]) -> Result<Vec<Array2<f64>>> {
    let g = data.n_cells();
    let mut out = vec![data.recent_rows(dates)?];
    let columns = (0..INDICES.len())
        .map(|i| VARIABLES.len() * PCS_PER_VARIABLE + i)
        .chain((0..VARIABLES.len()).map(|v| v * PCS_PER_VARIABLE));
    for j in columns {
        let mut m = Array2::zeros((dates.len(), g));
        for (i, &d) in dates.iter().enumerate() {
            let row = data
                .features
                .row(d)
                .ok_or_else(|| Error::OutOfRange { date: d.to_string(), context: "feature rows".into() })?;
            m.row_mut(i).fill(row[j]);
        }
        out.push(m);
    }
    Ok(out)
}

fn run_multillr(ctx: &Context<'_>) -> Result<(Array2<f64>, String)> {
    let train = &ctx.last.train;
    let mut doys: Vec<u32> = ctx.last.eval.iter().map(|d| d.day_of_year()).collect();
    doys.sort_unstable();
    let doy = doys[doys.len() / 2];
    let model = fit_multillr(&multillr_candidates(ctx.data, train)?, ctx.targets(train)?.view(), train, doy, &ctx.cfg.multillr)?;
    let pred = model.predict(&multillr_candidates(ctx.data, &ctx.last.eval)?)?;
    Ok((pred, format!("selected={:?}", model.selected)))
}

fn index_rows(data: &ForecastData, dates: &[Date]) -> Result<Array2<f64>> {
    let off = VARIABLES.len() * PCS_PER_VARIABLE;
    let x = data.design(dates, FeatureMode::OneDay)?;
    Ok(x.slice(s![.., off..off + INDICES.len()]).to_owned())
}

fn sequences(ctx: &Context<'_>, dates: &[Date], scaler: &PcScaler) -> Result<Array3<f64>> {
    let x = scaler.transform(&ctx.design(dates)?);
    let steps = ctx.cfg.mode.steps();
    x.into_shape_with_order((dates.len(), steps, FEATURES_PER_DATE)).map_err(|e| Error::Dimension(e.to_string()))
}

fn new_net(ctx: &Context<'_>, seed: u64) -> Net {
    let d = &ctx.cfg.deep;
    let steps = ctx.cfg.mode.steps();
    let g = ctx.data.n_cells();
    match ctx.cfg.model {
        ModelKind::Fnn => new_fnn(steps * FEATURES_PER_DATE, &d.fnn_hidden, g, seed),
        ModelKind::EncdecLast => {
            Net::EncDec(EncDec::new(steps, FEATURES_PER_DATE, d.hidden, d.layers, d.decoder_hidden, g, Wiring::LastStep, seed))
        }
        _ => Net::EncDec(EncDec::new(steps, FEATURES_PER_DATE, d.hidden, d.layers, d.decoder_hidden, g, Wiring::AllSteps, seed)),
    }
}

/// Finds the stopping epoch with early stopping on the first fold, then
/// retrains on the final range for that many epochs.
fn run_deep(ctx: &Context<'_>) -> Result<(Array2<f64>, String)> {
    let seed = ctx.seed();
    let base = TrainConfig { seed, ..ctx.cfg.deep.train };
    let epochs = match ctx.folds.first() {
        Some(fold) => {
            let scaler = PcScaler::fit(&ctx.design(&fold.train)?);
            let x = sequences(ctx, &fold.train, &scaler)?;
            let y = ctx.targets(&fold.train)?;
            let val: Vec<ValidationSet> = vec![(sequences(ctx, &fold.eval, &scaler)?, ctx.targets(&fold.eval)?)];
            let (_, history) = train(new_net(ctx, seed), x.view(), y.view(), &val, &base)?;
            history.best_epoch.max(1)
        }
        None => base.max_epochs,
    };
    let scaler = PcScaler::fit(&ctx.design(&ctx.last.train)?);
    let x = sequences(ctx, &ctx.last.train, &scaler)?;
    let y = ctx.targets(&ctx.last.train)?;
    let (net, _) = train(new_net(ctx, seed), x.view(), y.view(), &[], &TrainConfig { max_epochs: epochs, ..base })?;
    let pred = net.predict(sequences(ctx, &ctx.last.eval, &scaler)?.view())?;
    Ok((pred, format!("epochs={epochs}")))
}

fn evaluate_plan(data: &ForecastData, cfg: &PipelineConfig, plan: &SplitPlan, plan_index: usize) -> Result<PlanOutcome> {
    plan.check_leakage()?;
    let ctx = Context::new(data, cfg, plan, plan_index)?;
    let eval = &ctx.last.eval;
    let truth = ctx.targets(eval)?;
    let baseline = training_baseline(&data.targets, plan.final_train, eval)?;
    let tunes_on_folds = matches!(
        cfg.model,
        ModelKind::Lasso | ModelKind::Shuffled | ModelKind::Gbt | ModelKind::Autoknn
    ) || (matches!(cfg.model, ModelKind::Fnn | ModelKind::Encdec | ModelKind::EncdecLast) && !ctx.folds.is_empty());
    let audit = if cfg.model == ModelKind::Autoknn {
        // neighbours and regressions only see targets dated before the range end
        let mut out = Vec::new();
        for p in ctx.folds.iter().chain(std::iter::once(&ctx.last)) {
            let a = p.audit(&plan.id(), p.range.last());
            if !a.ok {
                return Err(Error::InvalidInput(format!("{} {}: target history overlaps evaluation", a.plan, a.phase)));
            }
            out.push(a);
        }
        out
    } else {
        ctx.all_audits(tunes_on_folds)?
    };
    let (pred, tuned) = match cfg.model {
        ModelKind::Lasso => run_lasso(&ctx, false)?,
        ModelKind::Shuffled => run_lasso(&ctx, true)?,
        ModelKind::Gbt => run_gbt(&ctx)?,
        ModelKind::Autoknn => run_autoknn(&ctx)?,
        ModelKind::Multillr => run_multillr(&ctx)?,
        ModelKind::Damped => {
            let train = &ctx.last.train;
            let model = fit_damped_persistence(data.recent_rows(train)?.view(), ctx.targets(train)?.view())?;
            (model.predict(data.recent_rows(eval)?.view())?, format!("alpha={:.6}", model.alpha))
        }
        ModelKind::LsIndices => {
            let train = &ctx.last.train;
            let model = fit_ls_indices(index_rows(data, train)?.view(), ctx.targets(train)?.view())?;
            (predict_linear(&model, index_rows(data, eval)?.view())?, String::new())
        }
        ModelKind::Fnn | ModelKind::Encdec | ModelKind::EncdecLast => run_deep(&ctx)?,
        ModelKind::Climatology => (baseline.clone(), String::new()),
        ModelKind::Oracle => (truth.clone(), String::new()),
    };
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} predictions for plan {}", cfg.model, plan.id())));
    }
    Ok(PlanOutcome { dates: eval.clone(), pred, truth, baseline, audit, tuned })
}

/// Runs every plan (concurrently, on the current rayon pool) and merges the
/// results in plan order. A plan whose fit fails is recorded in the report
/// and contributes no test dates.
pub fn run_pipeline(data: &ForecastData, plans: &[SplitPlan], cfg: &PipelineConfig, cell_coords: &[(usize, f64, f64)]) -> Result<SkillReport> {
    if cell_coords.len() != data.n_cells() {
        return Err(Error::Dimension(format!("{} cell coordinates for {} target cells", cell_coords.len(), data.n_cells())));
    }
    let outcomes: Vec<Result<PlanOutcome>> =
        plans.par_iter().enumerate().map(|(i, p)| evaluate_plan(data, cfg, p, i)).collect();
    let g = data.n_cells();
    let mut dates = Vec::new();
    let mut rows = (Vec::new(), Vec::new(), Vec::new());
    let mut failures = Vec::new();
    let mut audit = Vec::new();
    let mut tuned = Vec::new();
    for (plan, outcome) in plans.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                dates.extend(o.dates.iter().map(|&d| (d, plan.id())));
                rows.0.extend(o.pred.iter().copied());
                rows.1.extend(o.truth.iter().copied());
                rows.2.extend(o.baseline.iter().copied());
                audit.extend(o.audit);
                tuned.push((plan.id(), o.tuned));
            }
            Err(e) => failures.push(PlanFailure { plan: plan.id(), error: e.to_string() }),
        }
    }
    let shape = (dates.len(), g);
    let to_matrix = |v: Vec<f64>| Array2::from_shape_vec(shape, v).map_err(|e| Error::Dimension(e.to_string()));
    let (pred, truth, baseline) = (to_matrix(rows.0)?, to_matrix(rows.1)?, to_matrix(rows.2)?);
    let mut report = build_report(cfg.model.id(), cfg.seed, &dates, &pred, &truth, &baseline, cell_coords)?;
    report.plans = plans.iter().map(SplitPlan::id).collect();
    report.failures = failures;
    report.audit = audit;
    report.tuned = tuned;
    Ok(report)
}
