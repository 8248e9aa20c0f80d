//! Seeded synthetic climate-like worlds with planted sub-seasonal signal.
//!
//! Latent drivers follow independent AR(1) processes. Covariate fields and
//! indices observe the drivers on the same day through smooth random
//! loadings. Temperature responds to the drivers `response_delay` days
//! later, so the week 3-4 mean at `t` is a known linear function of the
//! driver history and the Bayes predictor is available in closed form.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::climatology::{fit_two_week_climatology, two_week_target, TARGET_WINDOW};
use crate::error::{Error, Result};
use crate::evalkit::spatial_skill;
use crate::features::{INDICES, VARIABLES};
use crate::ingest::{write_field, write_index_csv, GriddedField, IndexSeries};
use crate::timegrid::{write_land_mask, Date, DateRange, LatLonGrid};

/// Weight of the two nuisance processes mixed into every covariate.
const NUISANCE_WEIGHT: f64 = 0.5;
const NUISANCE_PERSISTENCE: f64 = 0.9;
const TMP2M_SEASONAL_AMPLITUDE: f64 = 10.0;
const COVARIATE_SEASONAL_AMPLITUDE: f64 = 0.3;
const INDEX_NOISE: f64 = 0.3;
const BURN_IN_DAYS: i64 = 60;
const TAIL_DAYS: i64 = 60;

/// A covariate (field or index, by name) observing one driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub name: String,
    pub driver: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalMap {
    pub covariates: Vec<Link>,
    /// `(driver, weight)` pairs feeding the temperature response.
    pub target: Vec<(usize, f64)>,
}

impl SignalMap {
    pub fn empty() -> Self {
        Self { covariates: Vec::new(), target: Vec::new() }
    }

    fn link(name: &str, driver: usize) -> Link {
        Link { name: name.to_string(), driver, weight: 1.0 }
    }

    /// Driver 0 in soil moisture, Pacific SST and the Nino 3.4 index;
    /// driver 1 in 500 hPa height, sea-level pressure and the NAO index.
    pub fn standard() -> Self {
        Self {
            covariates: vec![
                Self::link("sm", 0),
                Self::link("sst_pacific", 0),
                Self::link("nino34", 0),
                Self::link("hgt500", 1),
                Self::link("slp", 1),
                Self::link("nao", 1),
            ],
            target: vec![(0, 1.0), (1, 1.0)],
        }
    }

    /// Signal only in the soil-moisture block and two index series.
    pub fn soil_moisture_and_indices() -> Self {
        Self {
            covariates: vec![Self::link("sm", 0), Self::link("sm", 1), Self::link("nino34", 0), Self::link("nao", 1)],
            target: vec![(0, 1.0), (1, 1.0)],
        }
    }

    pub fn validate(&self, n_latent: usize) -> Result<()> {
        for l in &self.covariates {
            if l.driver >= n_latent {
                return Err(Error::InvalidInput(format!("link to driver {} of {n_latent}", l.driver)));
            }
            if !VARIABLES[1..].contains(&l.name.as_str()) && !INDICES.contains(&l.name.as_str()) {
                return Err(Error::InvalidInput(format!("unknown covariate {}", l.name)));
            }
            if l.name == "mjo_phase" {
                return Err(Error::InvalidInput("mjo_phase is a categorical clock and carries no signal".into()));
            }
        }
        if let Some(&(k, _)) = self.target.iter().find(|(k, _)| *k >= n_latent) {
            return Err(Error::InvalidInput(format!("target driver {k} of {n_latent}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub start_year: i32,
    pub years: usize,
    pub n_latent: usize,
    pub driver_persistence: f64,
    /// Days between a driver value and the temperature it forces.
    pub response_delay: i64,
    pub signal_map: SignalMap,
    /// Signal-to-noise ratio of the week 3-4 temperature mean.
    pub snr: f64,
    pub covariate_snr: f64,
    /// When false every variable is season-stationary.
    pub seasonal_cycle: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_lat: 8,
            n_lon: 8,
            start_year: 2007,
            years: 12,
            n_latent: 2,
            driver_persistence: 0.99,
            response_delay: 25,
            signal_map: SignalMap::standard(),
            snr: 1.3,
            covariate_snr: 3.0,
            seasonal_cycle: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.driver_persistence > 0.0 && self.driver_persistence < 1.0) {
            return Err(Error::InvalidInput(format!("persistence {} outside (0, 1)", self.driver_persistence)));
        }
        if !(self.snr > 0.0 && self.covariate_snr > 0.0) {
            return Err(Error::InvalidInput("snr must be positive".into()));
        }
        if self.n_lat < 2 || self.n_lon < 2 || self.years < 2 || self.n_latent == 0 {
            return Err(Error::InvalidInput("grid, years and drivers must be non-trivial".into()));
        }
        if self.response_delay < 0 {
            return Err(Error::InvalidInput("response delay must be non-negative".into()));
        }
        self.signal_map.validate(self.n_latent)
    }

    /// The calendar years plus a short tail so forecasts issued in the last
    /// December still have their week 3-4 target.
    pub fn dates(&self) -> DateRange {
        let start = Date::ymd(self.start_year, 1, 1);
        DateRange::new(start, Date::ymd(self.start_year + self.years as i32, 1, 1).add_days(TAIL_DAYS))
    }

    pub fn grid(&self) -> LatLonGrid {
        LatLonGrid::new(30.0, 2.0, self.n_lat, 250.0, 2.0, self.n_lon).expect("valid synthetic grid")
    }
}

/// Conditional expectation of the week 3-4 temperature anomaly given the
/// driver history.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesPredictor {
    /// Date of row 0 of `drivers`.
    pub start: Date,
    /// `n x K` driver values.
    pub drivers: Array2<f64>,
    pub persistence: f64,
    pub delay: i64,
    /// `G x K` response of each target cell to each driver.
    pub response: Array2<f64>,
}

impl BayesPredictor {
    fn driver(&self, d: Date, k: usize) -> Result<f64> {
        let i = d.days_since(self.start);
        if i < 0 || i as usize >= self.drivers.nrows() {
            return Err(Error::OutOfRange { date: d.to_string(), context: "driver history".into() });
        }
        Ok(self.drivers[[i as usize, k]])
    }

    /// Expected week 3-4 anomaly (temperature units) at forecast date `t`.
    pub fn predict(&self, t: Date) -> Result<Array1<f64>> {
        let k_drivers = self.drivers.ncols();
        let mut expected = vec![0.0; k_drivers];
        let n = (TARGET_WINDOW.1 - TARGET_WINDOW.0 + 1) as f64;
        for (k, e) in expected.iter_mut().enumerate() {
            let now = self.driver(t, k)?;
            let mut acc = 0.0;
            for m in TARGET_WINDOW.0..=TARGET_WINDOW.1 {
                let lag = m - self.delay;
                acc += if lag <= 0 { self.driver(t.add_days(lag), k)? } else { self.persistence.powi(lag as i32) * now };
            }
            *e = acc / n;
        }
        Ok(self.response.dot(&Array1::from(expected)))
    }
}

/// A generated world: the eight gridded variables and eight indices in the
/// canonical order, plus the ground truth.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub fields: Vec<GriddedField>,
    pub indices: Vec<IndexSeries>,
    pub bayes: BayesPredictor,
    /// Planted loading (unit RMS) of each covariate link, in `signal_map` order.
    pub loadings: Vec<Array1<f64>>,
    /// Planted per-cell amplitude of the temperature seasonal cycle.
    pub seasonal_amplitude: Array1<f64>,
    /// Planted per-cell temperature level.
    pub base_level: Array1<f64>,
}

/// Gaussian random field smoothed by a 3x3 box kernel applied three times and
/// scaled to unit RMS.
pub fn smooth_field(n_lat: usize, n_lon: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut f: Vec<f64> = (0..n_lat * n_lon).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..3 {
        let mut next = vec![0.0; f.len()];
        for r in 0..n_lat {
            for c in 0..n_lon {
                let (mut s, mut k) = (0.0, 0);
                for rr in r.saturating_sub(1)..(r + 2).min(n_lat) {
                    for cc in c.saturating_sub(1)..(c + 2).min(n_lon) {
                        s += f[rr * n_lon + cc];
                        k += 1;
                    }
                }
                next[r * n_lon + c] = s / k as f64;
            }
        }
        f = next;
    }
    let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
    Array1::from(f) / rms.max(1e-12)
}

fn ar1(n: usize, phi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let innovation = (1.0 - phi * phi).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut z: f64 = rng.sample(StandardNormal);
    for _ in 0..n {
        out.push(z);
        z = phi * z + innovation * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

fn seasonal(d: Date) -> f64 {
    -(2.0 * PI * (d.day_of_year() as f64 - 15.0) / 365.0).cos()
}

const UNITS: [&str; 8] = ["K", "mm", "K", "K", "%", "hPa", "m", "m"];

pub fn generate(config: &SynthConfig) -> Result<SynthWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid = config.grid();
    let (n_lat, n_lon) = (config.n_lat, config.n_lon);
    let g = grid.n_cells();
    let dates = config.dates();
    let n = dates.len();
    let lead = config.response_delay + BURN_IN_DAYS;
    let z_start = dates.start.add_days(-lead);
    let n_z = n + lead as usize;

    let mut drivers = Array2::zeros((n_z, config.n_latent));
    for k in 0..config.n_latent {
        for (i, v) in ar1(n_z, config.driver_persistence, &mut rng).into_iter().enumerate() {
            drivers[[i, k]] = v;
        }
    }
    let z_at = |t: usize, k: usize, delay: i64| drivers[[(t as i64 + lead - delay) as usize, k]];

    let mut response = Array2::zeros((g, config.n_latent));
    for &(k, w) in &config.signal_map.target {
        let pattern = smooth_field(n_lat, n_lon, &mut rng);
        for c in 0..g {
            response[[c, k]] += w * pattern[c];
        }
    }
    let loadings: Vec<Array1<f64>> = config
        .signal_map
        .covariates
        .iter()
        .map(|l| {
            if VARIABLES.contains(&l.name.as_str()) {
                smooth_field(n_lat, n_lon, &mut rng)
            } else {
                Array1::ones(1)
            }
        })
        .collect();

    let mut fields = Vec::with_capacity(VARIABLES.len());
    let base_level = smooth_field(n_lat, n_lon, &mut rng).mapv(|b| 285.0 + 2.0 * b);
    let season_scale = if config.seasonal_cycle { 1.0 } else { 0.0 };
    let seasonal_amplitude =
        smooth_field(n_lat, n_lon, &mut rng).mapv(|a| season_scale * TMP2M_SEASONAL_AMPLITUDE * (1.0 + 0.1 * a));
    // Daily noise scaled so the 14-day mean carries noise standard deviation 1/snr.
    let window = (TARGET_WINDOW.1 - TARGET_WINDOW.0 + 1) as f64;
    let daily_noise = window.sqrt() / config.snr;
    {
        let mut values = Array2::zeros((n, g));
        for (t, d) in dates.iter().enumerate() {
            let s = seasonal(d);
            for c in 0..g {
                let forced: f64 = (0..config.n_latent).map(|k| response[[c, k]] * z_at(t, k, config.response_delay)).sum();
                let eps: f64 = rng.sample(StandardNormal);
                values[[t, c]] = base_level[c]
                    + seasonal_amplitude[c] * s
                    + forced
                    + daily_noise * eps;
            }
        }
        fields.push(GriddedField::from_values(VARIABLES[0], UNITS[0], grid.clone(), dates.start, values)?);
    }
    for (v, &name) in VARIABLES.iter().enumerate().skip(1) {
        let season_pattern = smooth_field(n_lat, n_lon, &mut rng);
        let nuisance: Vec<(Array1<f64>, Vec<f64>)> = (0..2)
            .map(|_| (smooth_field(n_lat, n_lon, &mut rng), ar1(n, NUISANCE_PERSISTENCE, &mut rng)))
            .collect();
        let links: Vec<(usize, &Link)> =
            config.signal_map.covariates.iter().enumerate().filter(|(_, l)| l.name == name).collect();
        let noise = 1.0 / config.covariate_snr;
        let mut values = Array2::zeros((n, g));
        for (t, d) in dates.iter().enumerate() {
            let s = seasonal(d);
            for c in 0..g {
                let mut v = 10.0 * v as f64 + season_scale * COVARIATE_SEASONAL_AMPLITUDE * season_pattern[c] * s;
                for (pattern, series) in &nuisance {
                    v += NUISANCE_WEIGHT * pattern[c] * series[t];
                }
                for &(i, l) in &links {
                    v += l.weight * loadings[i][c] * z_at(t, l.driver, 0);
                }
                let eps: f64 = rng.sample(StandardNormal);
                values[[t, c]] = v + noise * eps;
            }
        }
        fields.push(GriddedField::from_values(name, UNITS[v], grid.clone(), dates.start, values)?);
    }

    let mut indices = Vec::with_capacity(INDICES.len());
    for &name in INDICES.iter() {
        let values: Vec<f64> = if name == "mjo_phase" {
            let mut angle = rng.random::<f64>() * 2.0 * PI;
            (0..n)
                .map(|_| {
                    angle = (angle + 2.0 * PI / 45.0 + 0.05 * rng.sample::<f64, _>(StandardNormal)).rem_euclid(2.0 * PI);
                    (angle / (PI / 4.0)).floor().min(7.0) + 1.0
                })
                .collect()
        } else {
            let nuisance = ar1(n, NUISANCE_PERSISTENCE, &mut rng);
            let links: Vec<&Link> = config.signal_map.covariates.iter().filter(|l| l.name == name).collect();
            (0..n)
                .map(|t| {
                    let mut v = NUISANCE_WEIGHT * nuisance[t];
                    for l in &links {
                        v += l.weight * z_at(t, l.driver, 0);
                    }
                    v + INDEX_NOISE * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        };
        let values = if name == "mjo_amplitude" { values.into_iter().map(|v: f64| v.abs()).collect() } else { values };
        indices.push(IndexSeries { name: name.to_string(), start: dates.start, values });
    }

    let bayes = BayesPredictor {
        start: z_start,
        drivers,
        persistence: config.driver_persistence,
        delay: config.response_delay,
        response,
    };
    Ok(SynthWorld { config: config.clone(), fields, indices, bayes, loadings, seasonal_amplitude, base_level })
}

impl SynthWorld {
    pub fn tmp2m(&self) -> &GriddedField {
        &self.fields[0]
    }

    /// Conditional expectation of the week 3-4 temperature mean at `t`.
    pub fn expected_window_mean(&self, t: Date) -> Result<Array1<f64>> {
        let anomaly = self.bayes.predict(t)?;
        let n = (TARGET_WINDOW.1 - TARGET_WINDOW.0 + 1) as f64;
        let season = (TARGET_WINDOW.0..=TARGET_WINDOW.1).map(|m| seasonal(t.add_days(m))).sum::<f64>() / n;
        Ok(&self.base_level + &(&self.seasonal_amplitude * season) + anomaly)
    }

    /// Mean spatial cosine between the Bayes predictor and the realized
    /// week 3-4 z-scores, with the two-week climatology fitted on every year.
    pub fn ceiling_skill(&self, dates: &[Date]) -> Result<f64> {
        let range = self.config.dates();
        let years = (range.start.year(), range.start.year() + self.config.years as i32 - 1);
        let c14 = fit_two_week_climatology(self.tmp2m(), years, 7)?;
        let targets = two_week_target(self.tmp2m(), &c14)?;
        if dates.is_empty() {
            return Err(Error::Empty("no test dates".into()));
        }
        let mut total = 0.0;
        for &t in dates {
            let truth = targets
                .row(t)
                .ok_or_else(|| Error::OutOfRange { date: t.to_string(), context: "synthetic target".into() })?;
            let expected = self.expected_window_mean(t)?;
            let doy = t.day_of_year();
            let pred: Array1<f64> = targets
                .cells
                .iter()
                .map(|&c| (expected[c] - c14.mean_at(doy, c)) / c14.std_at(doy, c))
                .collect();
            total += spatial_skill(pred.view(), truth)?;
        }
        Ok(total / dates.len() as f64)
    }

    /// Writes `fields/<name>.json`, `indices/<name>.csv`, `land_mask.csv`
    /// and `synth.json` under `dir`.
    pub fn write_store(&self, dir: &Path) -> Result<()> {
        let fields_dir = dir.join("fields");
        let indices_dir = dir.join("indices");
        fs::create_dir_all(&fields_dir).map_err(|e| Error::io(&fields_dir, e))?;
        fs::create_dir_all(&indices_dir).map_err(|e| Error::io(&indices_dir, e))?;
        for f in &self.fields {
            write_field(f, &fields_dir.join(format!("{}.json", f.name)))?;
        }
        for s in &self.indices {
            write_index_csv(&indices_dir.join(format!("{}.csv", s.name)), s)?;
        }
        let mut grid = self.tmp2m().grid.clone();
        grid.land_mask = Some(vec![true; grid.n_cells()]);
        write_land_mask(&dir.join("land_mask.csv"), &grid)?;
        let path = dir.join("synth.json");
        fs::write(&path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&path, e))
    }
}

/// Weekly test dates (anchored at January 1) in the last `years` years of the world.
pub fn test_dates(config: &SynthConfig, years: usize) -> Vec<Date> {
    let first = config.start_year + (config.years - years) as i32;
    let range = DateRange::new(Date::ymd(first, 1, 1), Date::ymd(config.start_year + config.years as i32, 1, 1));
    range.iter().step_by(7).collect()
}

pub fn ceiling_skill(config: &SynthConfig, dates: &[Date]) -> Result<f64> {
    generate(config)?.ceiling_skill(dates)
}
