//! Forecast verification: error metrics, correlation, stratified reports,
//! station correlation maps and plot-ready area exports.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::featurecube::{channel, FeatureCube};
use crate::fsutil::write_csv;
use crate::geogrid::{bin_point, Grid};
use crate::ingest::{uv_to_wind, ObservationRecord, StationMeta};
use crate::trainer::Prediction;

fn check_pair(y: &[f64], yhat: &[f64], what: &str) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Metric(format!("{what}: lengths {} and {} differ", y.len(), yhat.len())));
    }
    if y.is_empty() {
        return Err(Error::Metric(format!("{what} of empty input")));
    }
    Ok(())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "MAE")?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "RMSE")?;
    Ok((y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64).sqrt())
}

/// Pearson correlation with population moments.
pub fn correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "correlation")?;
    if x.len() < 2 {
        return Err(Error::Metric("correlation needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("correlation of a constant series is undefined".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Speed and direction components of a `(u, v)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derived {
    pub speed: f64,
    pub sin_dir: f64,
    pub cos_dir: f64,
    /// False for calm, where direction is undefined.
    pub dir_valid: bool,
}

pub fn derived_quantities(u: f64, v: f64) -> Derived {
    let speed = u.hypot(v);
    if speed > 0.0 {
        Derived {
            speed,
            sin_dir: -u / speed,
            cos_dir: -v / speed,
            dir_valid: true,
        }
    } else {
        Derived {
            speed: 0.0,
            sin_dir: 0.0,
            cos_dir: 0.0,
            dir_valid: false,
        }
    }
}

/// Local clock window `[start, end)` in minutes after midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockWindow {
    pub start_min: u32,
    pub end_min: u32,
}

impl ClockWindow {
    pub fn new(start_min: u32, end_min: u32) -> Self {
        Self { start_min, end_min }
    }

    pub fn contains(&self, minute_of_day: u32) -> bool {
        minute_of_day >= self.start_min && minute_of_day < self.end_min
    }

    fn parse(s: &str) -> std::result::Result<Self, String> {
        let hm = |p: &str| -> std::result::Result<u32, String> {
            let (h, m) = p.trim().split_once(':').ok_or_else(|| format!("expected HH:MM, got '{p}'"))?;
            let (h, m): (u32, u32) = (h.parse().map_err(|_| format!("bad hour in '{p}'"))?, m.parse().map_err(|_| format!("bad minute in '{p}'"))?);
            if h > 24 || m > 59 || h * 60 + m > 1440 {
                return Err(format!("clock time '{p}' outside the day"));
            }
            Ok(h * 60 + m)
        };
        let (a, b) = s.split_once('-').ok_or_else(|| format!("expected HH:MM-HH:MM, got '{s}'"))?;
        let w = Self::new(hm(a)?, hm(b)?);
        if w.start_min >= w.end_min {
            return Err(format!("window '{s}' must start before it ends"));
        }
        Ok(w)
    }
}

impl fmt::Display for ClockWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:02}:{:02}-{:02}:{:02}",
            self.start_min / 60,
            self.start_min % 60,
            self.end_min / 60,
            self.end_min % 60
        )
    }
}

impl Serialize for ClockWindow {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ClockWindow {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrataConfig {
    pub winter_months: Vec<u32>,
    pub summer_months: Vec<u32>,
    pub local_utc_offset_hours: i32,
    pub summer_day: ClockWindow,
    pub winter_day: ClockWindow,
    /// Day window for months in neither season.
    pub shoulder_day: ClockWindow,
}

impl Default for StrataConfig {
    fn default() -> Self {
        Self {
            winter_months: vec![6, 7, 8, 9],
            summer_months: vec![11, 12, 1, 2],
            local_utc_offset_hours: 8,
            summer_day: ClockWindow::new(5 * 60, 19 * 60 + 30),
            winter_day: ClockWindow::new(7 * 60 + 15, 17 * 60 + 30),
            shoulder_day: ClockWindow::new(6 * 60, 18 * 60 + 30),
        }
    }
}

impl StrataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad_month = self.winter_months.iter().chain(&self.summer_months).any(|m| !(1..=12).contains(m));
        let overlap = self.winter_months.iter().any(|m| self.summer_months.contains(m));
        if bad_month || overlap {
            return Err(Error::Config("strata: season months must be disjoint values in 1..=12".into()));
        }
        if self.local_utc_offset_hours.abs() > 14 {
            return Err(Error::Config("strata: UTC offset out of range".into()));
        }
        Ok(())
    }

    pub fn local_time(&self, t: DateTime<Utc>) -> chrono::NaiveDateTime {
        (t + Duration::hours(self.local_utc_offset_hours as i64)).naive_utc()
    }

    pub fn season(&self, t: DateTime<Utc>) -> Season {
        let m = self.local_time(t).month();
        if self.winter_months.contains(&m) {
            Season::Winter
        } else if self.summer_months.contains(&m) {
            Season::Summer
        } else {
            Season::Shoulder
        }
    }

    pub fn stratum(&self, t: DateTime<Utc>) -> (Season, DayPart) {
        let season = self.season(t);
        let local = self.local_time(t);
        let minute = local.hour() * 60 + local.minute();
        let window = match season {
            Season::Winter => self.winter_day,
            Season::Summer => self.summer_day,
            Season::Shoulder => self.shoulder_day,
        };
        (season, if window.contains(minute) { DayPart::Day } else { DayPart::Night })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Season {
    Winter,
    Summer,
    Shoulder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DayPart {
    Day,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Model,
    Ecmwf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quantity {
    U,
    V,
    Speed,
    Sin,
    Cos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Mae,
    Rmse,
    R,
}

impl Season {
    pub fn label(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Summer => "summer",
            Season::Shoulder => "shoulder",
        }
    }
}

impl DayPart {
    pub fn label(self) -> &'static str {
        match self {
            DayPart::Day => "day",
            DayPart::Night => "night",
        }
    }
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Source::Model => "model",
            Source::Ecmwf => "ecmwf",
        }
    }
}

impl Quantity {
    pub const ALL: [Quantity; 5] = [Quantity::U, Quantity::V, Quantity::Speed, Quantity::Sin, Quantity::Cos];

    pub fn label(self) -> &'static str {
        match self {
            Quantity::U => "u",
            Quantity::V => "v",
            Quantity::Speed => "speed",
            Quantity::Sin => "sin",
            Quantity::Cos => "cos",
        }
    }
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Mae => "MAE",
            Metric::Rmse => "RMSE",
            Metric::R => "r",
        }
    }
}

/// A forecast/truth pair at one station and instant.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub source: Source,
    pub station: String,
    pub time: DateTime<Utc>,
    pub horizon_min: i64,
    pub truth: (f64, f64),
    pub pred: (f64, f64),
}

/// Streaming moments of (prediction, truth) pairs, updated in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    sum_abs: f64,
    sum_sq: f64,
    mean_p: f64,
    mean_t: f64,
    m2_p: f64,
    m2_t: f64,
    c_pt: f64,
}

impl Moments {
    pub fn push(&mut self, pred: f64, truth: f64) {
        self.n += 1;
        let n = self.n as f64;
        let e = pred - truth;
        self.sum_abs += e.abs();
        self.sum_sq += e * e;
        let dp = pred - self.mean_p;
        let dt = truth - self.mean_t;
        self.mean_p += dp / n;
        self.mean_t += dt / n;
        self.m2_p += dp * (pred - self.mean_p);
        self.m2_t += dt * (truth - self.mean_t);
        self.c_pt += dp * (truth - self.mean_t);
    }

    pub fn mae(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum_abs / self.n as f64)
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.n > 0).then(|| (self.sum_sq / self.n as f64).sqrt())
    }

    pub fn r(&self) -> Option<f64> {
        if self.n < 2 || self.m2_p <= 0.0 || self.m2_t <= 0.0 {
            return None;
        }
        let r = (self.c_pt / (self.m2_p * self.m2_t).sqrt()).clamp(-1.0, 1.0);
        r.is_finite().then_some(r)
    }

    fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Mae => self.mae(),
            Metric::Rmse => self.rmse(),
            Metric::R => self.r(),
        }
    }
}

/// Bucket key; `None` marks the aggregate over that axis.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BucketKey {
    pub source: Source,
    pub quantity: Quantity,
    pub season: Option<Season>,
    pub daypart: Option<DayPart>,
    pub horizon_min: Option<i64>,
    pub station: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub quantity: Quantity,
    pub metric: Metric,
    pub season: Option<Season>,
    pub daypart: Option<DayPart>,
    pub horizon_min: Option<i64>,
    pub station: Option<String>,
    pub source: Source,
    pub value: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub buckets: BTreeMap<BucketKey, Moments>,
}

fn all_or<T: Copy>(v: T) -> [Option<T>; 2] {
    [Some(v), None]
}

/// Buckets points by season, day part, horizon and station (each with an
/// aggregate), then emits every defined metric. Non-positive horizons are
/// ignored.
pub fn stratified_report(points: &[EvalPoint], strata: &StrataConfig) -> MetricReport {
    let mut buckets: BTreeMap<BucketKey, Moments> = BTreeMap::new();
    for p in points.iter().filter(|p| p.horizon_min > 0) {
        let (season, daypart) = strata.stratum(p.time);
        let dt = derived_quantities(p.truth.0, p.truth.1);
        let dp = derived_quantities(p.pred.0, p.pred.1);
        let dir_ok = dt.dir_valid && dp.dir_valid;
        for q in Quantity::ALL {
            let (pv, tv) = match q {
                Quantity::U => (p.pred.0, p.truth.0),
                Quantity::V => (p.pred.1, p.truth.1),
                Quantity::Speed => (dp.speed, dt.speed),
                Quantity::Sin if dir_ok => (dp.sin_dir, dt.sin_dir),
                Quantity::Cos if dir_ok => (dp.cos_dir, dt.cos_dir),
                _ => continue,
            };
            for s in all_or(season) {
                for d in all_or(daypart) {
                    for h in all_or(p.horizon_min) {
                        for st in [Some(p.station.clone()), None] {
                            let key = BucketKey {
                                source: p.source,
                                quantity: q,
                                season: s,
                                daypart: d,
                                horizon_min: h,
                                station: st,
                            };
                            buckets.entry(key).or_default().push(pv, tv);
                        }
                    }
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (k, m) in &buckets {
        for metric in [Metric::Mae, Metric::Rmse, Metric::R] {
            if let Some(value) = m.get(metric) {
                rows.push(MetricRow {
                    quantity: k.quantity,
                    metric,
                    season: k.season,
                    daypart: k.daypart,
                    horizon_min: k.horizon_min,
                    station: k.station.clone(),
                    source: k.source,
                    value,
                    count: m.n,
                });
            }
        }
    }
    MetricReport { rows, buckets }
}

impl MetricReport {
    pub fn find(
        &self,
        source: Source,
        quantity: Quantity,
        metric: Metric,
        season: Option<Season>,
        daypart: Option<DayPart>,
        horizon_min: Option<i64>,
        station: Option<&str>,
    ) -> Option<&MetricRow> {
        self.rows.iter().find(|r| {
            r.source == source
                && r.quantity == quantity
                && r.metric == metric
                && r.season == season
                && r.daypart == daypart
                && r.horizon_min == horizon_min
                && r.station.as_deref() == station
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let all = |o: Option<&str>| o.unwrap_or("all").to_string();
        write_csv(
            path,
            &["quantity", "metric", "season", "daypart", "horizon_min", "station", "source", "value", "count"],
            self.rows.iter().map(|r| {
                vec![
                    r.quantity.label().to_string(),
                    r.metric.label().to_string(),
                    all(r.season.map(Season::label)),
                    all(r.daypart.map(DayPart::label)),
                    r.horizon_min.map_or("all".into(), |h| h.to_string()),
                    all(r.station.as_deref()),
                    r.source.label().to_string(),
                    format!("{:.9e}", r.value),
                    r.count.to_string(),
                ]
            }),
        )
    }
}

/// Forecast `(u, v)` of a source at output step `j` of a prediction.
fn source_uv(cube: &FeatureCube, p: &Prediction, j: usize, row: usize, col: usize, source: Source) -> Option<(f64, f64)> {
    match source {
        Source::Model => {
            let (u, v) = p.uv(j, row, col);
            Some((u as f64, v as f64))
        }
        Source::Ecmwf => {
            let k = cube.time_index(p.times[j])?;
            let cell = crate::geogrid::CellIndex { row, col };
            Some((cube.value(channel::U10F, k, cell) as f64, cube.value(channel::V10F, k, cell) as f64))
        }
    }
}

/// Pairs every positive-horizon forecast at a labelled cell with its label,
/// for each requested source.
pub fn collect_points(cube: &FeatureCube, predictions: &[Prediction], sources: &[Source]) -> Vec<EvalPoint> {
    let mut out = Vec::new();
    for p in predictions {
        for (j, &h) in p.horizons.iter().enumerate() {
            if h <= 0 {
                continue;
            }
            let Some(k) = cube.time_index(p.times[j]) else { continue };
            for (s, st) in cube.label_stations.iter().enumerate() {
                let Some((u, v)) = cube.label(k, s) else { continue };
                for &source in sources {
                    if let Some(pred) = source_uv(cube, p, j, st.cell.row, st.cell.col, source) {
                        out.push(EvalPoint {
                            source,
                            station: st.station_id.clone(),
                            time: p.times[j],
                            horizon_min: h * crate::featurecube::STEP_SECONDS / 60,
                            truth: (u as f64, v as f64),
                            pred,
                        });
                    }
                }
            }
        }
    }
    out
}

pub const MAP_HORIZONS_MIN: [i64; 4] = [30, 120, 240, 480];
pub const MIN_MAP_POINTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub horizon_min: i64,
    pub r_u: f64,
    pub r_v: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedStation {
    pub station_id: String,
    pub horizon_min: i64,
    pub count: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrelationMap {
    pub rows: Vec<CorrelationRow>,
    pub skipped: Vec<SkippedStation>,
}

/// Correlation of forecast 10 m components with observed 3 m components at
/// each station, per horizon.
pub fn correlation_map(
    cube: &FeatureCube,
    predictions: &[Prediction],
    stations: &[StationMeta],
    obs: &[ObservationRecord],
    horizons_min: &[i64],
    min_points: usize,
    source: Source,
) -> CorrelationMap {
    let wind3: HashMap<(&str, DateTime<Utc>), (f64, f64)> = obs
        .iter()
        .filter_map(|r| r.wind3_uv().map(|uv| ((r.station_id.as_str(), r.timestamp), uv)))
        .collect();
    let step_min = crate::featurecube::STEP_SECONDS / 60;
    let mut map = CorrelationMap::default();
    let mut ordered: Vec<&StationMeta> = stations.iter().collect();
    ordered.sort_by(|a, b| a.station_id.cmp(&b.station_id));
    for st in ordered {
        let Ok(cell) = bin_point(st.lat, st.lon, &cube.grid) else { continue };
        for &hm in horizons_min {
            let (mut pu, mut pv, mut ou, mut ov) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for p in predictions {
                for (j, &h) in p.horizons.iter().enumerate() {
                    if h * step_min != hm {
                        continue;
                    }
                    let Some(&(u3, v3)) = wind3.get(&(st.station_id.as_str(), p.times[j])) else { continue };
                    let Some((u, v)) = source_uv(cube, p, j, cell.row, cell.col, source) else { continue };
                    pu.push(u);
                    pv.push(v);
                    ou.push(u3);
                    ov.push(v3);
                }
            }
            let count = pu.len();
            if count == 0 {
                continue;
            }
            let skip = |reason: String| SkippedStation {
                station_id: st.station_id.clone(),
                horizon_min: hm,
                count,
                reason,
            };
            if count < min_points {
                map.skipped.push(skip(format!("only {count} points, need {min_points}")));
                continue;
            }
            match (correlation(&pu, &ou), correlation(&pv, &ov)) {
                (Ok(r_u), Ok(r_v)) => map.rows.push(CorrelationRow {
                    station_id: st.station_id.clone(),
                    lat: st.lat,
                    lon: st.lon,
                    horizon_min: hm,
                    r_u,
                    r_v,
                    count,
                }),
                (Err(e), _) | (_, Err(e)) => map.skipped.push(skip(e.to_string())),
            }
        }
    }
    map
}

impl CorrelationMap {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["station_id", "lat", "lon", "horizon_min", "r_u", "r_v", "count"],
            self.rows.iter().map(|r| {
                vec![
                    r.station_id.clone(),
                    r.lat.to_string(),
                    r.lon.to_string(),
                    r.horizon_min.to_string(),
                    format!("{:.9e}", r.r_u),
                    format!("{:.9e}", r.r_v),
                    r.count.to_string(),
                ]
            }),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaRow {
    pub lat: f64,
    pub lon: f64,
    pub u: f64,
    pub v: f64,
    pub speed: f64,
    pub dir: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationTruthRow {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub u: f64,
    pub v: f64,
    pub speed: f64,
    pub dir: f64,
}

/// Every cell of one forecast frame plus the labelled-station truths at the
/// same instant.
pub fn export_area_forecast(pred: &Prediction, j: usize, grid: &Grid, cube: &FeatureCube) -> (Vec<AreaRow>, Vec<StationTruthRow>) {
    let mut cells = Vec::with_capacity(grid.n_cells());
    for r in 0..grid.n_lat {
        for c in 0..grid.n_lon {
            let (u, v) = pred.uv(j, r, c);
            let (u, v) = (u as f64, v as f64);
            let (speed, dir) = uv_to_wind(u, v);
            cells.push(AreaRow {
                lat: grid.lat_centres[r],
                lon: grid.lon_centres[c],
                u,
                v,
                speed,
                dir,
            });
        }
    }
    let mut stations = Vec::new();
    if let Some(k) = cube.time_index(pred.times[j]) {
        for (s, st) in cube.label_stations.iter().enumerate() {
            if let Some((u, v)) = cube.label(k, s) {
                let (u, v) = (u as f64, v as f64);
                let (speed, dir) = uv_to_wind(u, v);
                stations.push(StationTruthRow {
                    station_id: st.station_id.clone(),
                    lat: st.lat,
                    lon: st.lon,
                    u,
                    v,
                    speed,
                    dir,
                });
            }
        }
    }
    (cells, stations)
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_area_csv(path: &Path, rows: &[AreaRow]) -> Result<()> {
    write_csv(
        path,
        &["lat", "lon", "u", "v", "speed", "dir"],
        rows.iter().map(|r| [r.lat, r.lon, r.u, r.v, r.speed, r.dir].map(sig9).to_vec()),
    )
}

pub fn write_station_truth_csv(path: &Path, rows: &[StationTruthRow]) -> Result<()> {
    write_csv(
        path,
        &["station_id", "lat", "lon", "u", "v", "speed", "dir"],
        rows.iter().map(|r| {
            let mut v = vec![r.station_id.clone()];
            v.extend([r.lat, r.lon, r.u, r.v, r.speed, r.dir].map(sig9));
            v
        }),
    )
}
