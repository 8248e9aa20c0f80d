//! Command-line front end: argument types, run configuration and the six
//! pipeline commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::climatology::{read_climatology, write_climatology, TargetSeries};
use crate::diagnostics::{
    correlation_map, gain_group_importance, mic_map, nonzero_importance, shapley_groups, GroupedData, ShapleyModel,
};
use crate::eof::{read_eof, write_eof};
use crate::error::{Error, Result};
use crate::evalkit::{
    fold_designs, plan_gbt, plan_lasso, run_pipeline, write_comparison, ModelKind, PipelineConfig, ScopeKind,
    SkillReport,
};
use crate::features::{
    assemble_dataset, decode_f64_le, encode_f64_le, monthly_plans, preprocess, write_dataset, Cadence, DailyFeatures,
    FeatureMode, ForecastData, PlanConfig, PreprocessConfig, Scope, SplitPlan, FEATURES_PER_DATE, INDICES, VARIABLES,
};
use crate::gbt::GbtParams;
use crate::ingest::{interp_daily, read_field, read_index_csv, GriddedField, IndexSeries};
use crate::linmodels::LassoProblem;
use crate::synthgen::{generate, SynthConfig};
use crate::timegrid::{read_land_mask, Date, DateRange, LatLonGrid};

#[derive(Debug, Parser)]
#[command(name = "ssf", version, about = "Sub-seasonal temperature forecasting experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic data store.
    Synth,
    /// Fit climatologies and EOF bases and project every field.
    Preprocess { store: PathBuf },
    /// Write design matrices for one feature mode and scope.
    Featurize {
        prep: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<FeatureMode>,
        #[arg(long, value_enum)]
        scope: Option<ScopeKind>,
    },
    /// Run the monthly evaluation for one model.
    TrainEval {
        prep: PathBuf,
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        #[arg(long, value_enum)]
        mode: Option<FeatureMode>,
        #[arg(long, value_enum)]
        scope: Option<ScopeKind>,
    },
    /// Dependence maps and grouped feature importance.
    Diagnose { prep: PathBuf },
    /// Comparison table and skill maps from report files or directories.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapleyMode {
    Off,
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub n_boot: usize,
    pub block: usize,
    /// Dependence measures use every `date_step`-th forecast date.
    pub date_step: usize,
    /// Importance is averaged over the first `importance_plans` plans.
    pub importance_plans: usize,
    pub shapley: ShapleyMode,
    /// Model refitted per coalition: `lasso` (fixed tuned penalty) or `gbt`.
    pub shapley_model: String,
    pub shapley_permutations: usize,
    pub shapley_gbt_rounds: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            n_boot: 100,
            block: 365,
            date_step: 7,
            importance_plans: 24,
            shapley: ShapleyMode::Exact,
            shapley_model: "lasso".into(),
            shapley_permutations: 200,
            shapley_gbt_rounds: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSettings {
    /// Inclusive test years; one plan per month.
    pub test_years: (i32, i32),
    pub cadence_days: i64,
    pub plan: PlanConfig,
}

impl Default for PlanSettings {
    fn default() -> Self {
        Self {
            test_years: (2017, 2018),
            cadence_days: 7,
            plan: PlanConfig { n_folds: 2, fold_train_years: 5, final_train_years: 30, gap_days: 28 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub plans: PlanSettings,
    pub pipeline: PipelineConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut pipeline = PipelineConfig::new(ModelKind::Lasso, FeatureMode::OneDay);
        pipeline.train_stride = 3;
        pipeline.lasso.n_lambdas = 10;
        pipeline.lasso.min_ratio = 0.01;
        pipeline.gbt.params = GbtParams { max_depth: 3, n_rounds: 100, ..GbtParams::default() };
        pipeline.deep.hidden = 16;
        pipeline.deep.decoder_hidden = 32;
        pipeline.deep.fnn_hidden = vec![32, 16];
        pipeline.deep.train.lr = 3e-3;
        pipeline.deep.train.max_epochs = 40;
        pipeline.deep.train.patience = 5;
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig { ref_years: (2007, 2016), eof_years: (2007, 2016), pool_window: 7 },
            plans: PlanSettings::default(),
            pipeline,
            diagnose: DiagnoseConfig::default(),
        }
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with the (possibly partial) JSON document at `path`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let over: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Manifest { path: path.to_path_buf(), message: e.to_string() })?;
        let mut value = serde_json::to_value(Self::default())?;
        merge(&mut value, over);
        serde_json::from_value(value).map_err(|e| Error::Manifest { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn plans(&self, data_start: Date) -> Result<Vec<SplitPlan>> {
        let p = &self.plans;
        let cadence = Cadence { anchor: Date::ymd(p.test_years.0, 1, 1), step_days: p.cadence_days };
        monthly_plans(p.test_years, data_start, cadence, &p.plan)
    }
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(e) if e.is_numerical() => 4,
            CliError::Run(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

/// Sidecar written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub files: Vec<String>,
}

pub const RUN_RECORD: &str = "run.json";

fn list_files(dir: &Path, prefix: &str, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = format!("{prefix}{}", entry.file_name().to_string_lossy());
        if entry.path().is_dir() {
            list_files(&entry.path(), &format!("{name}/"), out)?;
        } else if name != RUN_RECORD {
            out.push(name);
        }
    }
    Ok(())
}

/// Runs `body` against a scratch directory that replaces `out` only when the
/// command succeeds; a failed command leaves no partial output behind.
fn with_output(out: &Path, command: &str, cfg: &RunConfig, body: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = out.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let scratch = out.with_file_name(format!(".{name}.partial"));
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }
    fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    let result = body(&scratch).and_then(|()| {
        let mut files = Vec::new();
        list_files(&scratch, "", &mut files)?;
        files.sort();
        let record = RunRecord { command: command.into(), seed: cfg.seed, config_hash: cfg.hash(), config: cfg.clone(), files };
        let path = scratch.join(RUN_RECORD);
        fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))
    });
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&scratch);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::rename(&scratch, out).map_err(|e| Error::io(out, e))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} directory not found"))))
    }
}

fn load_store(store: &Path) -> Result<(Vec<GriddedField>, Vec<IndexSeries>)> {
    require_dir(store, "data store")?;
    let mut fields = VARIABLES
        .iter()
        .map(|v| read_field(&store.join("fields").join(format!("{v}.json"))))
        .collect::<Result<Vec<_>>>()?;
    let mask = store.join("land_mask.csv");
    if mask.exists() {
        fields[0].grid = read_land_mask(&mask, &fields[0].grid)?;
    }
    let range = fields
        .iter()
        .map(GriddedField::dates)
        .reduce(|a, b| DateRange::new(a.start.max(b.start), a.end.min(b.end)))
        .expect("eight fields");
    let indices = INDICES
        .iter()
        .map(|name| interp_daily(&read_index_csv(&store.join("indices").join(format!("{name}.csv")), name)?, range))
        .collect::<Result<Vec<_>>>()?;
    Ok((fields, indices))
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    start: Date,
    /// Column labels: feature names or flat target-cell indices.
    columns: Vec<String>,
    n_rows: usize,
    payload: String,
}

fn write_matrix(path: &Path, start: Date, columns: Vec<String>, values: &Array2<f64>) -> Result<()> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("matrix");
    let payload = format!("{stem}.bin");
    let bin = path.with_file_name(&payload);
    fs::write(&bin, encode_f64_le(values.iter())).map_err(|e| Error::io(&bin, e))?;
    let header = MatrixHeader { start, columns, n_rows: values.nrows(), payload };
    fs::write(path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path) -> Result<(Date, Vec<String>, Array2<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let h: MatrixHeader =
        serde_json::from_str(&text).map_err(|e| Error::Manifest { path: path.to_path_buf(), message: e.to_string() })?;
    let bin = path.with_file_name(&h.payload);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = h.n_rows * h.columns.len();
    if bytes.len() != 8 * expected {
        return Err(Error::PayloadLength { expected, found: bytes.len() / 8 });
    }
    let values = Array2::from_shape_vec((h.n_rows, h.columns.len()), decode_f64_le(&bytes))
        .map_err(|e| Error::Dimension(e.to_string()))?;
    Ok((h.start, h.columns, values))
}

fn write_series(path: &Path, s: &TargetSeries) -> Result<()> {
    write_matrix(path, s.start, s.cells.iter().map(usize::to_string).collect(), &s.values)
}

fn read_series(path: &Path) -> Result<TargetSeries> {
    let (start, columns, values) = read_matrix(path)?;
    let cells = columns
        .iter()
        .map(|c| c.parse().map_err(|_| Error::Manifest { path: path.to_path_buf(), message: format!("bad cell label {c}") }))
        .collect::<Result<_>>()?;
    Ok(TargetSeries { start, cells, values })
}

/// Preprocessed inputs as loaded back from disk.
pub struct Prepared {
    pub grid: LatLonGrid,
    pub data: ForecastData,
}

impl Prepared {
    pub fn cell_coords(&self) -> Vec<(usize, f64, f64)> {
        self.data
            .targets
            .cells
            .iter()
            .map(|&c| {
                let (lat, lon) = self.grid.center(c);
                (c, lat, lon)
            })
            .collect()
    }
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    require_dir(dir, "preprocessed")?;
    let path = dir.join("grid.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let grid: LatLonGrid = serde_json::from_str(&text).map_err(|e| Error::Manifest { path: path.clone(), message: e.to_string() })?;
    let (start, _, values) = read_matrix(&dir.join("features.json"))?;
    if values.ncols() != FEATURES_PER_DATE {
        return Err(Error::Dimension(format!("feature table has {} columns", values.ncols())));
    }
    let data = ForecastData {
        features: DailyFeatures { start, values },
        targets: read_series(&dir.join("targets.json"))?,
        recent: read_series(&dir.join("recent.json"))?,
    };
    Ok(Prepared { grid, data })
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let synth = SynthConfig { seed: cfg.seed, ..cfg.synth.clone() };
    synth.validate()?;
    log::info!("generating {}x{} world, {} years", synth.n_lat, synth.n_lon, synth.years);
    let world = generate(&synth)?;
    with_output(out, "synth", cfg, |dir| world.write_store(dir))
}

fn cmd_preprocess(cfg: &RunConfig, store: &Path, out: &Path) -> Result<()> {
    let (fields, indices) = load_store(store)?;
    log::info!("fitting climatology and EOF bases");
    let prep = preprocess(&fields, &indices, &cfg.preprocess)?;
    with_output(out, "preprocess", cfg, |dir| {
        let grid_path = dir.join("grid.json");
        fs::write(&grid_path, serde_json::to_string_pretty(&fields[0].grid)?).map_err(|e| Error::io(&grid_path, e))?;
        write_climatology(&prep.c14, "tmp2m_14d", &dir.join("climatology.json"))?;
        let eof_dir = dir.join("eof");
        fs::create_dir_all(&eof_dir).map_err(|e| Error::io(&eof_dir, e))?;
        for b in &prep.bases {
            write_eof(b, &eof_dir.join(format!("{}.json", b.variable)))?;
        }
        let names = crate::features::feature_names();
        write_matrix(&dir.join("features.json"), prep.data.features.start, names, &prep.data.features.values)?;
        write_series(&dir.join("targets.json"), &prep.data.targets)?;
        write_series(&dir.join("recent.json"), &prep.data.recent)
    })
}

fn cmd_featurize(cfg: &RunConfig, prep: &Path, mode: FeatureMode, scope: ScopeKind, out: &Path) -> Result<()> {
    let p = load_prepared(prep)?;
    // fail early on a damaged preprocessing directory
    read_climatology(&prep.join("climatology.json"))?;
    for v in VARIABLES {
        read_eof(&prep.join("eof").join(format!("{v}.json")))?;
    }
    let range = p.data.targets.dates();
    let scopes: Vec<(String, Scope)> = match scope {
        ScopeKind::Global => vec![("dataset".into(), Scope::Global)],
        ScopeKind::Local => (1..=12).map(|m| (format!("dataset_m{m:02}"), Scope::Local { month: m })).collect(),
    };
    let sets = scopes
        .into_iter()
        .map(|(stem, s)| Ok((stem, assemble_dataset(&p.data, range, mode, s)?)))
        .collect::<Result<Vec<_>>>()?;
    with_output(out, "featurize", cfg, |dir| {
        for (stem, ds) in &sets {
            write_dataset(ds, &dir.join(format!("{stem}.json")))?;
        }
        Ok(())
    })
}

pub fn report_stem(cfg: &PipelineConfig) -> String {
    let scope = match cfg.scope {
        ScopeKind::Global => "global",
        ScopeKind::Local => "local",
    };
    format!("{}_{}_{scope}", cfg.model.id(), cfg.mode)
}

fn cmd_train_eval(cfg: &RunConfig, prep: &Path, out: &Path) -> Result<()> {
    let p = load_prepared(prep)?;
    let plans = cfg.plans(p.data.features.start)?;
    log::info!("{}: {} plans", cfg.pipeline.model, plans.len());
    let report = run_pipeline(&p.data, &plans, &cfg.pipeline, &p.cell_coords())?;
    for f in &report.failures {
        log::warn!("plan {} failed: {}", f.plan, f.error);
    }
    if report.per_date.is_empty() {
        return Err(report.failures.first().map_or_else(
            || Error::Empty("no test dates were scored".into()),
            |f| Error::Numerical(format!("every plan failed; first: {} {}", f.plan, f.error)),
        ));
    }
    with_output(out, "train-eval", cfg, |dir| report.write(dir, &report_stem(&cfg.pipeline)))
}

fn write_map(path: &Path, coords: &[(usize, f64, f64)], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lat", "lon", "value"])?;
    for (&(_, lat, lon), v) in coords.iter().zip(values) {
        w.write_record([lat.to_string(), lon.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn broadcast(column: ndarray::ArrayView1<'_, f64>, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((column.len(), width), |(i, _)| column[i])
}

fn cmd_diagnose(cfg: &RunConfig, prep: &Path, out: &Path) -> Result<()> {
    let p = load_prepared(prep)?;
    let coords = p.cell_coords();
    let d = &p.data;
    let dates: Vec<Date> = d
        .targets
        .dates()
        .iter()
        .filter(|&t| d.recent.index_of(t).is_some() && d.features.row(t).is_some())
        .step_by(cfg.diagnose.date_step.max(1))
        .collect();
    let target = d.target_rows(&dates)?;
    let recent = d.recent_rows(&dates)?;
    let g = target.ncols();
    log::info!("dependence maps over {} dates, {} cells", dates.len(), g);
    let mic_recent = mic_map(target.view(), recent.view(), cfg.diagnose.n_boot, cfg.diagnose.block, cfg.seed)?;
    let mut maps = vec![
        ("mic_recent".to_string(), mic_recent),
        ("pearson_recent".to_string(), correlation_map(target.view(), recent.view(), false)?),
        ("spearman_recent".to_string(), correlation_map(target.view(), recent.view(), true)?),
    ];
    let rows = d.design(&dates, FeatureMode::OneDay)?;
    for (i, name) in INDICES.iter().enumerate() {
        let col = rows.column(VARIABLES.len() * crate::features::PCS_PER_VARIABLE + i);
        maps.push((format!("pearson_{name}"), correlation_map(target.view(), broadcast(col, g).view(), false)?));
    }

    let plans = cfg.plans(d.features.start)?;
    let chosen = &plans[..cfg.diagnose.importance_plans.clamp(1, plans.len())];
    let one_day = PipelineConfig { mode: FeatureMode::OneDay, ..cfg.pipeline.clone() };
    log::info!("importance over {} plans", chosen.len());
    let lasso = chosen
        .iter()
        .enumerate()
        .map(|(i, plan)| plan_lasso(d, &one_day, plan, i))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<_> = lasso.iter().map(|(m, _)| m.clone()).collect();
    let gbt = chosen
        .iter()
        .enumerate()
        .map(|(i, plan)| plan_gbt(d, &one_day, plan, i).map(|(e, _)| e))
        .collect::<Result<Vec<_>>>()?;
    let mut tables = vec![nonzero_importance(&models)?, gain_group_importance(&gbt)?];
    if cfg.diagnose.shapley != ShapleyMode::Off {
        let (x, y, xv, yv) = fold_designs(d, &one_day, &chosen[0], 0)?;
        let lambda = lasso[0].1 * LassoProblem::new(x.view(), y.view())?.lambda_max();
        let data = GroupedData { x, y, validation: vec![(xv, yv)] };
        let model = match cfg.diagnose.shapley_model.as_str() {
            "lasso" => ShapleyModel::Lasso { lambda },
            "gbt" => ShapleyModel::Gbt {
                params: GbtParams { n_rounds: cfg.diagnose.shapley_gbt_rounds, seed: cfg.seed, ..cfg.pipeline.gbt.params },
            },
            other => return Err(Error::InvalidInput(format!("unknown shapley model {other}"))),
        };
        let exact = cfg.diagnose.shapley == ShapleyMode::Exact;
        let (table, result) = shapley_groups(&model, &data, exact, cfg.diagnose.shapley_permutations, cfg.seed)?;
        for (mask, err) in &result.failures {
            log::warn!("shapley coalition {mask:#011b} skipped: {err}");
        }
        tables.push(table);
    }

    with_output(out, "diagnose", cfg, |dir| {
        for (name, values) in &maps {
            write_map(&dir.join(format!("{name}.csv")), &coords, values)?;
        }
        let svg = dir.join("mic_recent.svg");
        fs::write(&svg, map_svg(&coords, &maps[0].1, "mean MIC, target vs recent anomaly", false))
            .map_err(|e| Error::io(&svg, e))?;
        for t in &tables {
            t.write_csv(&dir.join(format!("importance_{}.csv", t.method)))?;
        }
        Ok(())
    })
}

fn collect_reports(paths: &[PathBuf]) -> Result<Vec<SkillReport>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json") && f.file_name().is_some_and(|n| n != RUN_RECORD))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "report not found")));
        }
    }
    if files.is_empty() {
        return Err(Error::Empty("no report files found".into()));
    }
    files.iter().map(|f| SkillReport::read(f)).collect()
}

fn cmd_report(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let reports = collect_reports(inputs)?;
    with_output(out, "report", cfg, |dir| {
        write_comparison(&reports, &dir.join("comparison.csv"))?;
        for r in &reports {
            let coords: Vec<(usize, f64, f64)> = r.per_cell.iter().map(|c| (c.cell, c.lat, c.lon)).collect();
            let values: Vec<f64> = r.per_cell.iter().map(|c| c.temporal_cosine).collect();
            let path = dir.join(format!("{}_skill_map.svg", r.model));
            let title = format!("{}: temporal cosine skill", r.model);
            fs::write(&path, map_svg(&coords, &values, &title, true)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })
}

/// Diverging colour for `v` on `[-1, 1]`: brown below zero, white at zero,
/// green above.
pub fn diverging_color(v: f64) -> (u8, u8, u8) {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let (end, t) = if v >= 0.0 { ((0.0, 104.0, 55.0), v) } else { ((140.0, 81.0, 10.0), -v) };
    let mix = |a: f64| (255.0 + (a - 255.0) * t).round() as u8;
    (mix(end.0), mix(end.1), mix(end.2))
}

/// Self-contained SVG heat map of per-cell values, one square per cell,
/// with the colour scale pinned to `[-1, 1]` (or `[0, 1]` when unsigned).
pub fn map_svg(coords: &[(usize, f64, f64)], values: &[f64], title: &str, signed: bool) -> String {
    let mut lats: Vec<f64> = coords.iter().map(|c| c.1).collect();
    let mut lons: Vec<f64> = coords.iter().map(|c| c.2).collect();
    for v in [&mut lats, &mut lons] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let cell = 24.0;
    let (w, h) = (lons.len().max(1) as f64 * cell, lats.len().max(1) as f64 * cell);
    let legend_y = h + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        w.max(200.0) + 20.0,
        legend_y + 30.0
    );
    let _ = writeln!(s, r#"<text x="10" y="16">{title}</text>"#);
    for (&(_, lat, lon), &v) in coords.iter().zip(values) {
        let col = lons.partition_point(|&x| x < lon) as f64;
        let row = (lats.len() - 1 - lats.partition_point(|&x| x < lat)) as f64;
        let (r, g, b) = diverging_color(if signed { v } else { v.clamp(0.0, 1.0) });
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"><title>{lat},{lon}: {v:.3}</title></rect>"#,
            10.0 + col * cell,
            24.0 + row * cell
        );
    }
    let lo = if signed { -1.0 } else { 0.0 };
    for i in 0..=20 {
        let v = lo + (1.0 - lo) * f64::from(i) / 20.0;
        let (r, g, b) = diverging_color(v);
        let _ = writeln!(s, r#"<rect x="{}" y="{legend_y}" width="9" height="10" fill="rgb({r},{g},{b})"/>"#, 10 + i * 9);
    }
    let _ = writeln!(s, r#"<text x="10" y="{}">{lo}</text>"#, legend_y + 24.0);
    let _ = writeln!(s, r#"<text x="190" y="{}" text-anchor="end">1</text>"#, legend_y + 24.0);
    s.push_str("</svg>\n");
    s
}

/// Applies flag overrides to the configuration file (or defaults).
pub fn resolve_config(cli: &Cli) -> std::result::Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref()).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.pipeline.seed = cfg.seed;
    match &cli.command {
        Command::TrainEval { model, mode, scope, .. } => {
            if let Some(m) = model {
                cfg.pipeline.model = *m;
            }
            if let Some(m) = mode {
                cfg.pipeline.mode = *m;
            }
            if let Some(s) = scope {
                cfg.pipeline.scope = *s;
            }
        }
        Command::Featurize { mode, scope, .. } => {
            if let Some(m) = mode {
                cfg.pipeline.mode = *m;
            }
            if let Some(s) = scope {
                cfg.pipeline.scope = *s;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> std::result::Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let out = cli.common.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let jobs = cli.common.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth => cmd_synth(&cfg, &out),
        Command::Preprocess { store } => cmd_preprocess(&cfg, store, &out),
        Command::Featurize { prep, .. } => cmd_featurize(&cfg, prep, cfg.pipeline.mode, cfg.pipeline.scope, &out),
        Command::TrainEval { prep, .. } => cmd_train_eval(&cfg, prep, &out),
        Command::Diagnose { prep } => cmd_diagnose(&cfg, prep, &out),
        Command::Report { reports } => cmd_report(&cfg, reports, &out),
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 9, "synth": {"n_lat": 5}, "pipeline": {"lasso": {"n_lambdas": 4}}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.synth.n_lat, 5);
        assert_eq!(cfg.synth.n_lon, 8);
        assert_eq!(cfg.pipeline.lasso.n_lambdas, 4);
        assert_eq!(cfg.pipeline.lasso.min_ratio, 0.01);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        fs::write(&path, r#"{"synth": {"n_lat": "x"}}"#).unwrap();
        assert!(RunConfig::load(Some(&path)).is_err());
    }

    #[test]
    fn colors_are_pinned() {
        assert_eq!(diverging_color(0.0), (255, 255, 255));
        assert_eq!(diverging_color(1.0), (0, 104, 55));
        assert_eq!(diverging_color(5.0), diverging_color(1.0));
        assert_eq!(diverging_color(-1.0), (140, 81, 10));
        let svg = map_svg(&[(0, 30.0, 250.0), (1, 30.0, 252.0)], &[0.5, -0.5], "t", true);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("href"));
    }

    #[test]
    fn failed_command_leaves_no_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let cfg = RunConfig::default();
        let r = with_output(&out, "x", &cfg, |d| {
            fs::write(d.join("a.txt"), "partial").unwrap();
            Err(Error::Empty("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        with_output(&out, "x", &cfg, |d| fs::write(d.join("a.txt"), "ok").map_err(|e| Error::io(d, e))).unwrap();
        let record: RunRecord = serde_json::from_str(&fs::read_to_string(out.join(RUN_RECORD)).unwrap()).unwrap();
        assert_eq!(record.files, vec!["a.txt".to_string()]);
        assert_eq!(record.config_hash, cfg.hash());
    }
}
