//! Analytic synthetic scenarios: station reports, coarse fields, terrain and
//! the exact 10 m truth they were sampled from.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurecube::{step, WindowConfig, STEP_SECONDS};
use crate::fsutil::write_csv;
use crate::geogrid::{make_grid, DemPoint, Grid, GridSpec};
use crate::ingest::{format_timestamp, uv_to_wind, ObservationRecord, StationMeta};
use crate::trainer::Prediction;
use windcast_tensor::Tensor;

pub const COARSE_DEG: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSpec {
    /// km/h.
    pub amplitude: f64,
    pub wavelength_deg: f64,
    /// Diurnal temperature swing, degrees Celsius.
    pub diurnal_amplitude: f64,
    /// Extra phase per degree across the wave, radians.
    pub phase_gradient: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            amplitude: 20.0,
            wavelength_deg: 8.0,
            diurnal_amplitude: 6.0,
            phase_gradient: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Coupling {
    pub alpha: f64,
    /// Standard deviation of the 10 m noise, km/h.
    pub noise_sd: f64,
}

impl Default for Coupling {
    fn default() -> Self {
        Self {
            alpha: 1.2,
            noise_sd: 0.0,
        }
    }
}

/// Noise level giving correlation `r` between the 10 m and 3 m components of
/// a sinusoid of amplitude `amplitude`.
pub fn noise_for_correlation(alpha: f64, amplitude: f64, r: f64) -> f64 {
    alpha * (amplitude / 2f64.sqrt()) * (1.0 / (r * r) - 1.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub grid: GridSpec,
    pub n_stations: usize,
    pub n_label_stations: usize,
    pub days: u32,
    pub seed: u64,
    pub start: DateTime<Utc>,
    pub field: FieldSpec,
    pub coupling: Coupling,
    /// Longest sample span the scenario must hold, in cube steps.
    pub span_steps: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec {
                lat_start: -32.0,
                lat_end: -33.2,
                lon_start: 115.0,
                lon_end: 116.2,
                cell_deg: 0.1,
            },
            n_stations: 5,
            n_label_stations: 2,
            days: 8,
            seed: 0,
            start: Utc.with_ymd_and_hms(2022, 1, 22, 0, 0, 0).unwrap(),
            field: FieldSpec::default(),
            coupling: Coupling::default(),
            span_steps: 224,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<Grid> {
        let grid = make_grid(self.grid)?;
        let bad = |m: String| Err(Error::Config(format!("scenario: {m}")));
        if self.n_label_stations < 1 || self.n_label_stations > self.n_stations {
            return bad(format!(
                "need 1 <= n_label_stations <= n_stations, got {} of {}",
                self.n_label_stations, self.n_stations
            ));
        }
        if self.n_stations > grid.n_cells() {
            return bad(format!("{} stations do not fit in {} cells", self.n_stations, grid.n_cells()));
        }
        let per_day = (86_400 / STEP_SECONDS) as usize;
        let min_days = self.span_steps.div_ceil(per_day) + 1;
        if (self.days as usize) < min_days {
            return bad(format!("{} days cannot hold a {}-step sample; need {min_days}", self.days, self.span_steps));
        }
        let f = &self.field;
        if !(f.amplitude > 0.0 && f.wavelength_deg > 0.0) || !f.diurnal_amplitude.is_finite() || !f.phase_gradient.is_finite() {
            return bad("field amplitude and wavelength must be positive".into());
        }
        if !(self.coupling.alpha > 0.0 && self.coupling.noise_sd >= 0.0) {
            return bad("coupling needs alpha > 0 and noise_sd >= 0".into());
        }
        if self.start.timestamp() % STEP_SECONDS != 0 {
            return bad("start must fall on a 15-minute tick".into());
        }
        Ok(grid)
    }

    pub fn n_ticks(&self) -> usize {
        self.days as usize * (86_400 / STEP_SECONDS) as usize
    }

    pub fn oracle(&self) -> TruthOracle {
        TruthOracle {
            field: self.field,
            alpha: self.coupling.alpha,
        }
    }
}

/// Closed-form fields. Time enters as hours since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthOracle {
    pub field: FieldSpec,
    pub alpha: f64,
}

fn hours(t: DateTime<Utc>) -> f64 {
    t.timestamp() as f64 / 3600.0
}

impl TruthOracle {
    fn diurnal(&self, t: DateTime<Utc>) -> f64 {
        2.0 * PI * hours(t) / 24.0
    }

    pub fn u3(&self, lat: f64, lon: f64, t: DateTime<Utc>) -> f64 {
        let f = &self.field;
        f.amplitude * (2.0 * PI * lon / f.wavelength_deg + self.diurnal(t) + f.phase_gradient * lat).sin()
    }

    pub fn v3(&self, lat: f64, lon: f64, t: DateTime<Utc>) -> f64 {
        let f = &self.field;
        f.amplitude * (2.0 * PI * lat / f.wavelength_deg + self.diurnal(t) + f.phase_gradient * lon).cos()
    }

    /// Noise-free 10 m components.
    pub fn uv10(&self, lat: f64, lon: f64, t: DateTime<Utc>) -> (f64, f64) {
        (self.alpha * self.u3(lat, lon, t), self.alpha * self.v3(lat, lon, t))
    }

    pub fn temperature(&self, lat: f64, lon: f64, t: DateTime<Utc>) -> f64 {
        20.0 + self.field.diurnal_amplitude * (self.diurnal(t) - PI / 2.0).sin() + 0.5 * (lat + 33.0) - 0.2 * (lon - 116.0)
    }

    pub fn humidity(&self, lat: f64, lon: f64, t: DateTime<Utc>) -> f64 {
        60.0 - 2.0 * (self.temperature(lat, lon, t) - 20.0)
    }

    pub fn msl(&self, lat: f64, lon: f64, t: DateTime<Utc>) -> f64 {
        let w = self.field.wavelength_deg;
        1013.0 + 4.0 * (2.0 * PI * (lat + lon) / w).sin() * (2.0 * PI * hours(t) / 48.0).cos()
    }

    pub fn dem(&self, lat: f64, lon: f64) -> f64 {
        150.0 + 100.0 * (2.0 * PI * lon / 3.0).sin() * (2.0 * PI * lat / 5.0).cos()
    }
}

/// Truth u10/v10 at every cell centre and tick, laid out `(t, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthField {
    pub grid: Grid,
    pub times: Vec<DateTime<Utc>>,
    pub u10: Vec<f64>,
    pub v10: Vec<f64>,
}

impl TruthField {
    pub fn time_index(&self, t: DateTime<Utc>) -> Option<usize> {
        let secs = (t - *self.times.first()?).num_seconds();
        (secs >= 0 && secs % STEP_SECONDS == 0)
            .then(|| (secs / STEP_SECONDS) as usize)
            .filter(|&k| k < self.times.len())
    }

    pub fn frame(&self, k: usize) -> (&[f64], &[f64]) {
        let n = self.grid.n_cells();
        (&self.u10[k * n..(k + 1) * n], &self.v10[k * n..(k + 1) * n])
    }
}

/// One coarse variable sampled hourly on the 0.25 degree lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseSamples {
    pub variable: &'static str,
    pub grid: Grid,
    pub times: Vec<DateTime<Utc>>,
    /// `(t, row, col)`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub grid: Grid,
    pub stations: Vec<StationMeta>,
    pub observations: Vec<ObservationRecord>,
    pub coarse: Vec<CoarseSamples>,
    pub dem: Vec<DemPoint>,
    pub truth: TruthField,
}

pub mod files {
    pub const STATIONS: &str = "stations.csv";
    pub const OBSERVATIONS: &str = "observations.csv";
    pub const DEM: &str = "dem.csv";
    pub const TRUTH: &str = "truth.csv";
    pub const COARSE_U10: &str = "coarse_u10.csv";
    pub const COARSE_V10: &str = "coarse_v10.csv";
    pub const COARSE_MSL: &str = "coarse_msl.csv";
}

/// Coarse lattice covering `grid` with at least one coarse cell to spare.
pub fn coarse_grid_for(grid: &Grid) -> Result<Grid> {
    let south = grid.lat_centres[grid.n_lat - 1];
    let north = grid.lat_centres[0];
    let west = grid.lon_centres[0];
    let east = grid.lon_centres[grid.n_lon - 1];
    let lat0 = (north / COARSE_DEG).ceil() * COARSE_DEG + COARSE_DEG;
    let lat1 = (south / COARSE_DEG).floor() * COARSE_DEG - COARSE_DEG;
    let lon0 = (west / COARSE_DEG).floor() * COARSE_DEG - COARSE_DEG;
    let lon1 = (east / COARSE_DEG).ceil() * COARSE_DEG + COARSE_DEG;
    let n_lat = ((lat0 - lat1) / COARSE_DEG).round() as usize + 1;
    let n_lon = ((lon1 - lon0) / COARSE_DEG).round() as usize + 1;
    make_grid(GridSpec::from_centres(lat0, lon0, n_lat, n_lon, COARSE_DEG))
}

fn sample_lattice(grid: &Grid, times: &[DateTime<Utc>], f: impl Fn(f64, f64, DateTime<Utc>) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len() * grid.n_cells());
    for &t in times {
        for &lat in &grid.lat_centres {
            for &lon in &grid.lon_centres {
                out.push(f(lat, lon, t));
            }
        }
    }
    out
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Bundle> {
    let grid = cfg.validate()?;
    let oracle = cfg.oracle();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Distinct cells, one station at each centre.
    let cells = sample(&mut rng, grid.n_cells(), cfg.n_stations).into_vec();
    let stations: Vec<StationMeta> = cells
        .iter()
        .enumerate()
        .map(|(i, &flat)| StationMeta {
            station_id: format!("SYN{:03}", i + 1),
            lat: grid.lat_centres[flat / grid.n_lon],
            lon: grid.lon_centres[flat % grid.n_lon],
            has_10m_labels: i < cfg.n_label_stations,
        })
        .collect();

    let ticks: Vec<DateTime<Utc>> = (0..cfg.n_ticks()).map(|k| cfg.start + step() * k as i32).collect();
    let noise = Normal::new(0.0, cfg.coupling.noise_sd).map_err(|e| Error::Config(format!("scenario noise: {e}")))?;
    let mut observations = Vec::with_capacity(ticks.len() * stations.len());
    for st in &stations {
        for &t in &ticks {
            let (u3, v3) = (oracle.u3(st.lat, st.lon, t), oracle.v3(st.lat, st.lon, t));
            let (s3, d3) = uv_to_wind(u3, v3);
            let (wind10_speed, wind10_dir) = if st.has_10m_labels {
                let (u, v) = oracle.uv10(st.lat, st.lon, t);
                let (u, v) = (u + noise.sample(&mut rng), v + noise.sample(&mut rng));
                let (s, d) = uv_to_wind(u, v);
                (Some(s), Some(d))
            } else {
                (None, None)
            };
            observations.push(ObservationRecord {
                station_id: st.station_id.clone(),
                timestamp: t,
                temperature: Some(oracle.temperature(st.lat, st.lon, t)),
                humidity: Some(oracle.humidity(st.lat, st.lon, t)),
                wind3_speed: Some(s3),
                wind3_dir: Some(d3),
                wind10_speed,
                wind10_dir,
            });
        }
    }

    let cgrid = coarse_grid_for(&grid)?;
    let hours: Vec<DateTime<Utc>> = (0..=cfg.days as i64 * 24).map(|h| cfg.start + Duration::hours(h)).collect();
    let coarse = vec![
        CoarseSamples {
            variable: "u10",
            grid: cgrid.clone(),
            times: hours.clone(),
            values: sample_lattice(&cgrid, &hours, |la, lo, t| oracle.uv10(la, lo, t).0),
        },
        CoarseSamples {
            variable: "v10",
            grid: cgrid.clone(),
            times: hours.clone(),
            values: sample_lattice(&cgrid, &hours, |la, lo, t| oracle.uv10(la, lo, t).1),
        },
        CoarseSamples {
            variable: "msl",
            grid: cgrid.clone(),
            times: hours.clone(),
            values: sample_lattice(&cgrid, &hours, |la, lo, t| oracle.msl(la, lo, t)),
        },
    ];

    let mut dem = Vec::with_capacity(grid.n_cells());
    for &lat in &grid.lat_centres {
        for &lon in &grid.lon_centres {
            dem.push(DemPoint {
                lat,
                lon,
                elevation: oracle.dem(lat, lon),
            });
        }
    }

    let truth = TruthField {
        u10: sample_lattice(&grid, &ticks, |la, lo, t| oracle.uv10(la, lo, t).0),
        v10: sample_lattice(&grid, &ticks, |la, lo, t| oracle.uv10(la, lo, t).1),
        grid: grid.clone(),
        times: ticks,
    };

    Ok(Bundle {
        grid,
        stations,
        observations,
        coarse,
        dem,
        truth,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn coarse_file(name: &str) -> &'static str {
    match name {
        "u10" => files::COARSE_U10,
        "v10" => files::COARSE_V10,
        _ => files::COARSE_MSL,
    }
}

/// Writes the bundle in the ingest schemas plus `truth.csv`.
pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    write_csv(
        &dir.join(files::STATIONS),
        &["station_id", "lat", "lon", "has_10m"],
        bundle.stations.iter().map(|s| {
            vec![
                s.station_id.clone(),
                s.lat.to_string(),
                s.lon.to_string(),
                (s.has_10m_labels as u8).to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join(files::OBSERVATIONS),
        &[
            "station_id",
            "timestamp",
            "temp_c",
            "humidity_pct",
            "wind3_speed_kmh",
            "wind3_dir_deg",
            "wind10_speed_kmh",
            "wind10_dir_deg",
        ],
        bundle.observations.iter().map(|r| {
            vec![
                r.station_id.clone(),
                format_timestamp(r.timestamp),
                opt(r.temperature),
                opt(r.humidity),
                opt(r.wind3_speed),
                opt(r.wind3_dir),
                opt(r.wind10_speed),
                opt(r.wind10_dir),
            ]
        }),
    )?;
    for c in &bundle.coarse {
        let plane = c.grid.n_cells();
        let rows = c.times.iter().enumerate().flat_map(|(k, t)| {
            let ts = format_timestamp(*t);
            (0..plane).map(move |i| {
                vec![
                    ts.clone(),
                    c.grid.lat_centres[i / c.grid.n_lon].to_string(),
                    c.grid.lon_centres[i % c.grid.n_lon].to_string(),
                    c.values[k * plane + i].to_string(),
                ]
            })
        });
        write_csv(&dir.join(coarse_file(c.variable)), &["timestamp", "lat", "lon", c.variable], rows)?;
    }
    write_csv(
        &dir.join(files::DEM),
        &["lat", "lon", "elevation_m"],
        bundle.dem.iter().map(|d| vec![d.lat.to_string(), d.lon.to_string(), d.elevation.to_string()]),
    )?;
    let tr = &bundle.truth;
    let plane = tr.grid.n_cells();
    let rows = tr.times.iter().enumerate().flat_map(|(k, t)| {
        let ts = format_timestamp(*t);
        (0..plane).map(move |i| {
            vec![
                ts.clone(),
                tr.grid.lat_centres[i / tr.grid.n_lon].to_string(),
                tr.grid.lon_centres[i % tr.grid.n_lon].to_string(),
                tr.u10[k * plane + i].to_string(),
                tr.v10[k * plane + i].to_string(),
            ]
        })
    });
    write_csv(&dir.join(files::TRUTH), &["timestamp", "lat", "lon", "u10", "v10"], rows)
}

/// A full-grid forecast at one instant, `(row, col)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFrame {
    pub time: DateTime<Utc>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Positive-horizon frames of a set of predictions.
pub fn prediction_frames(predictions: &[Prediction]) -> Vec<GridFrame> {
    let mut out = Vec::new();
    for p in predictions {
        let (h, w) = (p.values.shape()[2], p.values.shape()[3]);
        for (j, &hz) in p.horizons.iter().enumerate() {
            if hz <= 0 {
                continue;
            }
            let (mut u, mut v) = (Vec::with_capacity(h * w), Vec::with_capacity(h * w));
            for r in 0..h {
                for c in 0..w {
                    let (a, b) = p.uv(j, r, c);
                    u.push(a as f64);
                    v.push(b as f64);
                }
            }
            out.push(GridFrame { time: p.times[j], u, v });
        }
    }
    out
}

/// The perfect forecaster: truth laid out as model predictions for the
/// windows starting at `starts` (indices into the truth time axis).
pub fn truth_predictions(truth: &TruthField, cfg: &WindowConfig, starts: &[usize]) -> Result<Vec<Prediction>> {
    let (l, h, w) = (cfg.len(), truth.grid.n_lat, truth.grid.n_lon);
    let plane = h * w;
    starts
        .iter()
        .map(|&t0| {
            if t0 + cfg.m + l > truth.times.len() {
                return Err(Error::OutOfRange(format!("window at {t0} runs past the truth period")));
            }
            let mut values = vec![0f32; 2 * l * plane];
            for j in 0..l {
                let (u, v) = truth.frame(t0 + cfg.m + j);
                for i in 0..plane {
                    values[j * plane + i] = u[i] as f32;
                    values[(l + j) * plane + i] = v[i] as f32;
                }
            }
            Ok(Prediction {
                t0: truth.times[t0],
                t0_index: t0,
                issue_time: truth.times[t0 + cfg.d - 1],
                times: (0..l).map(|j| truth.times[t0 + cfg.m + j]).collect(),
                horizons: (0..l).map(|j| cfg.horizon(j)).collect(),
                values: Tensor::new(vec![2, l, h, w], values)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScore {
    pub mae_u: f64,
    pub mae_v: f64,
    pub rmse_u: f64,
    pub rmse_v: f64,
    pub count: usize,
}

impl OracleScore {
    pub fn mae(&self) -> f64 {
        (self.mae_u + self.mae_v) / 2.0
    }
}

fn aligned<'a>(frames: &'a [GridFrame], truth: &'a TruthField) -> Result<Vec<(&'a GridFrame, usize)>> {
    let n = truth.grid.n_cells();
    frames
        .iter()
        .map(|f| {
            if f.u.len() != n || f.v.len() != n {
                return Err(Error::Input(format!(
                    "forecast frame has {} cells, truth grid has {n}",
                    f.u.len()
                )));
            }
            let k = truth
                .time_index(f.time)
                .ok_or_else(|| Error::OutOfRange(format!("no truth at {}", format_timestamp(f.time))))?;
            Ok((f, k))
        })
        .collect()
}

/// Grid-wide errors against the analytic truth.
pub fn oracle_eval(frames: &[GridFrame], truth: &TruthField) -> Result<OracleScore> {
    let pairs = aligned(frames, truth)?;
    let (mut au, mut av, mut su, mut sv, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (f, k) in pairs {
        let (tu, tv) = truth.frame(k);
        for i in 0..tu.len() {
            let (eu, ev) = (f.u[i] - tu[i], f.v[i] - tv[i]);
            au += eu.abs();
            av += ev.abs();
            su += eu * eu;
            sv += ev * ev;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metric("oracle evaluation over no points".into()));
    }
    let nf = n as f64;
    Ok(OracleScore {
        mae_u: au / nf,
        mae_v: av / nf,
        rmse_u: (su / nf).sqrt(),
        rmse_v: (sv / nf).sqrt(),
        count: n,
    })
}

/// Persistence forecasts: the truth at each issue time repeated for
/// horizons `1..=max_horizon`.
pub fn persistence_frames(truth: &TruthField, issue_indices: &[usize], max_horizon: usize) -> Vec<GridFrame> {
    let mut out = Vec::new();
    for &k in issue_indices {
        let (u, v) = truth.frame(k);
        for h in 1..=max_horizon {
            if k + h < truth.times.len() {
                out.push(GridFrame {
                    time: truth.times[k + h],
                    u: u.to_vec(),
                    v: v.to_vec(),
                });
            }
        }
    }
    out
}

/// Mean absolute error over u and v of persistence, by whole-slice arithmetic.
pub fn persistence_mae_vectorized(truth: &TruthField, issue_indices: &[usize], max_horizon: usize) -> f64 {
    let n = truth.grid.n_cells();
    let (sum, count) = issue_indices
        .iter()
        .flat_map(|&k| (1..=max_horizon).filter(move |h| k + h < truth.times.len()).map(move |h| (k, k + h)))
        .map(|(a, b)| {
            let err = |x: &[f64]| -> f64 {
                x[a * n..(a + 1) * n]
                    .iter()
                    .zip(&x[b * n..(b + 1) * n])
                    .map(|(p, t)| (p - t).abs())
                    .sum()
            };
            (err(&truth.u10) + err(&truth.v10), 2 * n)
        })
        .fold((0.0, 0usize), |acc, (s, c)| (acc.0 + s, acc.1 + c));
    sum / count as f64
}

/// Same quantity as [`persistence_mae_vectorized`], one point at a time.
pub fn persistence_mae_scalar(truth: &TruthField, issue_indices: &[usize], max_horizon: usize) -> f64 {
    let (n_lat, n_lon) = (truth.grid.n_lat, truth.grid.n_lon);
    let mut total = 0.0;
    let mut count = 0usize;
    for &k in issue_indices {
        for h in 1..=max_horizon {
            let t = k + h;
            if t >= truth.times.len() {
                continue;
            }
            for r in 0..n_lat {
                for c in 0..n_lon {
                    let i = r * n_lon + c;
                    let pu = truth.u10[k * n_lat * n_lon + i];
                    let pv = truth.v10[k * n_lat * n_lon + i];
                    total += (pu - truth.u10[t * n_lat * n_lon + i]).abs();
                    count += 1;
                    total += (pv - truth.v10[t * n_lat * n_lon + i]).abs();
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::correlation;
    use crate::geogrid::bin_point;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            days: 3,
            span_steps: 96,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn rejects_unsatisfiable() {
        let mut c = small();
        c.n_label_stations = 6;
        assert!(matches!(generate(&c), Err(Error::Config(_))));
        let mut c = small();
        c.days = 1;
        assert!(matches!(generate(&c), Err(Error::Config(_))));
        let mut c = small();
        c.n_label_stations = 0;
        assert!(matches!(generate(&c), Err(Error::Config(_))));
    }

    #[test]
    fn exact_coupling_without_noise() {
        let b = generate(&small()).unwrap();
        for st in b.stations.iter().filter(|s| s.has_10m_labels) {
            let (mut u3, mut u10) = (Vec::new(), Vec::new());
            for r in b.observations.iter().filter(|r| r.station_id == st.station_id) {
                u3.push(r.wind3_uv().unwrap().0);
                u10.push(r.wind10_uv().unwrap().0);
            }
            assert!((correlation(&u10, &u3).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn labels_equal_truth_at_station_cells() {
        let b = generate(&small()).unwrap();
        let n = b.grid.n_cells();
        for r in &b.observations {
            let st = b.stations.iter().find(|s| s.station_id == r.station_id).unwrap();
            let Some((u, v)) = r.wind10_uv() else { continue };
            let cell = bin_point(st.lat, st.lon, &b.grid).unwrap();
            let k = b.truth.time_index(r.timestamp).unwrap();
            let i = k * n + b.grid.flat(cell);
            assert!((u - b.truth.u10[i]).abs() < 1e-9 && (v - b.truth.v10[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_bundle(&generate(&small()).unwrap(), a.path()).unwrap();
        write_bundle(&generate(&small()).unwrap(), b.path()).unwrap();
        for name in [files::STATIONS, files::OBSERVATIONS, files::DEM, files::TRUTH, files::COARSE_U10, files::COARSE_V10, files::COARSE_MSL] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
        }
    }

    #[test]
    fn tuned_noise_hits_target_correlation() {
        let mut c = ScenarioConfig {
            days: 120,
            n_stations: 1,
            n_label_stations: 1,
            ..ScenarioConfig::default()
        };
        c.coupling.noise_sd = noise_for_correlation(c.coupling.alpha, c.field.amplitude, 0.99);
        let b = generate(&c).unwrap();
        let u3: Vec<f64> = b.observations.iter().map(|r| r.wind3_uv().unwrap().0).collect();
        let u10: Vec<f64> = b.observations.iter().map(|r| r.wind10_uv().unwrap().0).collect();
        assert!(u3.len() >= 10_000);
        let r = correlation(&u10, &u3).unwrap();
        assert!((r - 0.99).abs() <= 0.005, "r = {r}");
    }

    #[test]
    fn coarse_lattice_has_margin() {
        let grid = make_grid(ScenarioConfig::default().grid).unwrap();
        let cg = coarse_grid_for(&grid).unwrap();
        assert!(cg.lat_centres[0] >= grid.lat_centres[0] + COARSE_DEG);
        assert!(*cg.lat_centres.last().unwrap() <= *grid.lat_centres.last().unwrap() - COARSE_DEG);
        assert!(cg.lon_centres[0] <= grid.lon_centres[0] - COARSE_DEG);
        assert!(*cg.lon_centres.last().unwrap() >= *grid.lon_centres.last().unwrap() + COARSE_DEG);
    }

    #[test]
    fn oracle_eval_perfect_and_offset() {
        let b = generate(&small()).unwrap();
        let frames: Vec<GridFrame> = (0..5)
            .map(|k| {
                let (u, v) = b.truth.frame(k);
                GridFrame {
                    time: b.truth.times[k],
                    u: u.to_vec(),
                    v: v.to_vec(),
                }
            })
            .collect();
        let s = oracle_eval(&frames, &b.truth).unwrap();
        assert_eq!((s.mae_u, s.mae_v, s.rmse_u, s.rmse_v), (0.0, 0.0, 0.0, 0.0));
        let shifted: Vec<GridFrame> = frames
            .iter()
            .map(|f| GridFrame {
                time: f.time,
                u: f.u.iter().map(|x| x + 0.75).collect(),
                v: f.v.iter().map(|x| x - 0.75).collect(),
            })
            .collect();
        let s = oracle_eval(&shifted, &b.truth).unwrap();
        assert!((s.mae_u - 0.75).abs() < 1e-12 && (s.mae_v - 0.75).abs() < 1e-12);
        let bad = vec![GridFrame {
            time: frames[0].time,
            u: vec![0.0; 3],
            v: vec![0.0; 3],
        }];
        assert!(oracle_eval(&bad, &b.truth).is_err());
    }

    #[test]
    fn persistence_two_ways_agree() {
        let b = generate(&small()).unwrap();
        let issues: Vec<usize> = (0..b.truth.times.len()).step_by(7).collect();
        let vec_mae = persistence_mae_vectorized(&b.truth, &issues, 32);
        let loop_mae = persistence_mae_scalar(&b.truth, &issues, 32);
        assert!(vec_mae > 0.0);
        assert!((vec_mae - loop_mae).abs() <= 1e-12, "{vec_mae} vs {loop_mae}");
        let frames = persistence_frames(&b.truth, &issues, 32);
        assert!((oracle_eval(&frames, &b.truth).unwrap().mae() - vec_mae).abs() < 1e-12);
    }
}
