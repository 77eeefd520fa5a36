//! Station, observation, correction and coarse-field file ingestion plus the
//! wind and calendar conversions applied on the way in.
//!
//! Wind directions follow the meteorological convention: the bearing the wind
//! blows from, clockwise from north. `u` is eastward and `v` northward.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike, Utc};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{make_grid, DemPoint, Grid, GridSpec, GriddedField, TimeSeriesField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub has_10m_labels: bool,
}

/// One 15-minute station report. Absent readings stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub station_id: String,
    pub timestamp: DateTime<Utc>,
    /// Degrees Celsius.
    pub temperature: Option<f64>,
    /// Percent.
    pub humidity: Option<f64>,
    /// km/h at 3 m.
    pub wind3_speed: Option<f64>,
    pub wind3_dir: Option<f64>,
    /// km/h at 10 m.
    pub wind10_speed: Option<f64>,
    pub wind10_dir: Option<f64>,
}

impl ObservationRecord {
    pub fn wind3_uv(&self) -> Option<(f64, f64)> {
        match (self.wind3_speed, self.wind3_dir) {
            (Some(s), Some(d)) => wind_to_uv(s, d).ok(),
            _ => None,
        }
    }

    pub fn wind10_uv(&self) -> Option<(f64, f64)> {
        match (self.wind10_speed, self.wind10_dir) {
            (Some(s), Some(d)) => wind_to_uv(s, d).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionField {
    Wind3Dir,
    Wind10Dir,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrectionAction {
    /// Degrees added clockwise to a direction field.
    Rotate { field: DirectionField, degrees: f64 },
    /// Removes the 10 m readings.
    DropLabels,
}

/// A station fix-up active over `[active_from, active_to)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionRule {
    pub station_id: String,
    pub action: CorrectionAction,
    pub active_from: DateTime<Utc>,
    pub active_to: DateTime<Utc>,
}

impl CorrectionRule {
    fn covers(&self, t: DateTime<Utc>) -> bool {
        t >= self.active_from && t < self.active_to
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeFeatures {
    pub sin_month: f64,
    pub cos_month: f64,
    pub sin_hour: f64,
    pub cos_hour: f64,
    pub sin_doy: f64,
    pub cos_doy: f64,
}

impl TimeFeatures {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.sin_month,
            self.cos_month,
            self.sin_hour,
            self.cos_hour,
            self.sin_doy,
            self.cos_doy,
        ]
    }
}

/// Speed and meteorological direction to `(u, v)`.
pub fn wind_to_uv(speed: f64, dir_deg: f64) -> Result<(f64, f64)> {
    if !(speed >= 0.0) {
        return Err(Error::Input(format!("wind speed must be non-negative, got {speed}")));
    }
    let rad = dir_deg.to_radians();
    Ok((-speed * rad.sin(), -speed * rad.cos()))
}

/// `(u, v)` to speed and meteorological direction in `[0, 360)`. Calm is `(0, 0)`.
pub fn uv_to_wind(u: f64, v: f64) -> (f64, f64) {
    let speed = u.hypot(v);
    if speed == 0.0 {
        return (0.0, 0.0);
    }
    let mut dir = (-u).atan2(-v).to_degrees().rem_euclid(360.0);
    if dir >= 360.0 {
        dir = 0.0;
    }
    (speed, dir)
}

pub fn time_features(t: DateTime<Utc>) -> TimeFeatures {
    let month = 2.0 * PI * (t.month0() as f64) / 12.0;
    let hour = 2.0 * PI * (t.hour() as f64 + t.minute() as f64 / 60.0) / 24.0;
    let doy = 2.0 * PI * (t.ordinal0() as f64) / 365.25;
    TimeFeatures {
        sin_month: month.sin(),
        cos_month: month.cos(),
        sin_hour: hour.sin(),
        cos_hour: hour.cos(),
        sin_doy: doy.sin(),
        cos_doy: doy.cos(),
    }
}

/// Applies correction rules in order. Rules naming stations absent from the
/// records are skipped with a warning, which is also returned.
pub fn apply_corrections(
    mut records: Vec<ObservationRecord>,
    rules: &[CorrectionRule],
) -> (Vec<ObservationRecord>, Vec<String>) {
    let known: HashSet<&str> = records.iter().map(|r| r.station_id.as_str()).collect();
    let mut warnings = Vec::new();
    let active: Vec<&CorrectionRule> = rules
        .iter()
        .filter(|rule| {
            let ok = known.contains(rule.station_id.as_str());
            if !ok {
                let msg = format!("correction rule for unknown station {} skipped", rule.station_id);
                warn!("{msg}");
                warnings.push(msg);
            }
            ok
        })
        .collect();
    for rec in &mut records {
        for rule in &active {
            if rule.station_id != rec.station_id || !rule.covers(rec.timestamp) {
                continue;
            }
            match rule.action {
                CorrectionAction::Rotate { field, degrees } => {
                    let slot = match field {
                        DirectionField::Wind3Dir => &mut rec.wind3_dir,
                        DirectionField::Wind10Dir => &mut rec.wind10_dir,
                    };
                    if let Some(d) = slot {
                        *d = (*d + degrees).rem_euclid(360.0);
                    }
                }
                CorrectionAction::DropLabels => {
                    rec.wind10_speed = None;
                    rec.wind10_dir = None;
                }
            }
        }
    }
    (records, warnings)
}

/// A row that failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
}

/// Result of parsing one file: accepted records, rejected rows, warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub rejects: Vec<Reject>,
    pub warnings: Vec<String>,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            rejects: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map(|n| n.and_utc())
        .map_err(|_| format!("unparseable timestamp '{s}'"))
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

struct Columns {
    file: String,
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(file: &str, headers: &csv::StringRecord, required: &[&str]) -> Result<Self> {
        let index: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        if let Some(missing) = required.iter().find(|c| !index.contains_key(**c)) {
            return Err(Error::Schema {
                file: file.to_string(),
                reason: format!("missing required column '{missing}'"),
            });
        }
        Ok(Self {
            file: file.to_string(),
            index,
        })
    }

    fn raw<'a>(&self, row: &'a csv::StringRecord, name: &str) -> Option<&'a str> {
        self.index
            .get(name)
            .and_then(|&i| row.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
    }

    fn text(&self, row: &csv::StringRecord, name: &str) -> std::result::Result<String, String> {
        self.raw(row, name)
            .map(str::to_string)
            .ok_or_else(|| format!("empty '{name}'"))
    }

    fn opt_num(&self, row: &csv::StringRecord, name: &str) -> std::result::Result<Option<f64>, String> {
        match self.raw(row, name) {
            None => Ok(None),
            Some(s) => s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| format!("bad number '{s}' in '{name}'")),
        }
    }

    fn num(&self, row: &csv::StringRecord, name: &str) -> std::result::Result<f64, String> {
        self.opt_num(row, name)?.ok_or_else(|| format!("empty '{name}'"))
    }

    fn time(&self, row: &csv::StringRecord, name: &str) -> std::result::Result<DateTime<Utc>, String> {
        parse_timestamp(&self.text(row, name)?)
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input)
}

/// Drives a row parser over a CSV stream, collecting rejects instead of failing.
fn parse_rows<R: Read, T>(
    file: &str,
    input: R,
    required: &[&str],
    mut row_fn: impl FnMut(&Columns, &csv::StringRecord, &mut Vec<String>) -> std::result::Result<T, String>,
) -> Result<Parsed<T>> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let cols = Columns::new(file, &headers, required)?;
    let mut out = Parsed::default();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.rejects.push(Reject {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let mut warnings = Vec::new();
        match row_fn(&cols, &row, &mut warnings) {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejects.push(Reject { line, reason }),
        }
        for w in warnings {
            let msg = format!("{}:{line}: {w}", cols.file);
            warn!("{msg}");
            out.warnings.push(msg);
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// `station_id,lat,lon,has_10m`
pub fn parse_catalog<R: Read>(input: R) -> Result<Parsed<StationMeta>> {
    let mut seen = HashSet::new();
    parse_rows("stations.csv", input, &["station_id", "lat", "lon", "has_10m"], |c, row, _| {
        let station_id = c.text(row, "station_id")?;
        if !seen.insert(station_id.clone()) {
            return Err(format!("duplicate station '{station_id}'"));
        }
        let has_10m_labels = match c.text(row, "has_10m")?.as_str() {
            "1" => true,
            "0" => false,
            other => return Err(format!("has_10m must be 0 or 1, got '{other}'")),
        };
        Ok(StationMeta {
            station_id,
            lat: c.num(row, "lat")?,
            lon: c.num(row, "lon")?,
            has_10m_labels,
        })
    })
}

fn check_direction(name: &str, dir: Option<f64>, warnings: &mut Vec<String>) -> std::result::Result<Option<f64>, String> {
    match dir {
        Some(d) if d == 360.0 => {
            warnings.push(format!("{name} of 360 normalized to 0"));
            Ok(Some(0.0))
        }
        Some(d) if !(0.0..360.0).contains(&d) => Err(format!("{name} {d} outside [0, 360)")),
        other => Ok(other),
    }
}

fn check_speed(name: &str, speed: Option<f64>) -> std::result::Result<Option<f64>, String> {
    match speed {
        Some(s) if s < 0.0 => Err(format!("{name} {s} is negative")),
        other => Ok(other),
    }
}

/// `station_id,timestamp,temp_c,humidity_pct,wind3_speed_kmh,wind3_dir_deg[,wind10_speed_kmh,wind10_dir_deg]`
pub fn parse_observations<R: Read>(input: R) -> Result<Parsed<ObservationRecord>> {
    let required = [
        "station_id",
        "timestamp",
        "temp_c",
        "humidity_pct",
        "wind3_speed_kmh",
        "wind3_dir_deg",
    ];
    let mut seen = HashSet::new();
    parse_rows("observations.csv", input, &required, |c, row, warnings| {
        let station_id = c.text(row, "station_id")?;
        let timestamp = c.time(row, "timestamp")?;
        if timestamp.minute() % 15 != 0 || timestamp.second() != 0 || timestamp.nanosecond() != 0 {
            return Err(format!("timestamp {timestamp} is not on a 15-minute tick"));
        }
        if !seen.insert((station_id.clone(), timestamp)) {
            return Err(format!("duplicate report for {station_id} at {timestamp}"));
        }
        Ok(ObservationRecord {
            temperature: c.opt_num(row, "temp_c")?,
            humidity: c.opt_num(row, "humidity_pct")?,
            wind3_speed: check_speed("wind3_speed_kmh", c.opt_num(row, "wind3_speed_kmh")?)?,
            wind3_dir: check_direction("wind3_dir_deg", c.opt_num(row, "wind3_dir_deg")?, warnings)?,
            wind10_speed: check_speed("wind10_speed_kmh", c.opt_num(row, "wind10_speed_kmh")?)?,
            wind10_dir: check_direction("wind10_dir_deg", c.opt_num(row, "wind10_dir_deg")?, warnings)?,
            station_id,
            timestamp,
        })
    })
}

/// `station_id,field,rotation_deg,drop_labels,active_from,active_to`
pub fn parse_corrections<R: Read>(input: R) -> Result<Parsed<CorrectionRule>> {
    let required = [
        "station_id",
        "field",
        "rotation_deg",
        "drop_labels",
        "active_from",
        "active_to",
    ];
    parse_rows("corrections.csv", input, &required, |c, row, _| {
        let station_id = c.text(row, "station_id")?;
        let active_from = c.time(row, "active_from")?;
        let active_to = c.time(row, "active_to")?;
        if active_from >= active_to {
            return Err("active_from must precede active_to".into());
        }
        let drop = matches!(c.raw(row, "drop_labels"), Some("1"));
        let action = if drop {
            CorrectionAction::DropLabels
        } else {
            let field = match c.text(row, "field")?.as_str() {
                "wind3_dir" => DirectionField::Wind3Dir,
                "wind10_dir" => DirectionField::Wind10Dir,
                other => return Err(format!("unknown correction field '{other}'")),
            };
            CorrectionAction::Rotate {
                field,
                degrees: c.num(row, "rotation_deg")?,
            }
        };
        Ok(CorrectionRule {
            station_id,
            action,
            active_from,
            active_to,
        })
    })
}

/// `lat,lon,elevation_m`
pub fn parse_dem<R: Read>(input: R) -> Result<Parsed<DemPoint>> {
    parse_rows("dem.csv", input, &["lat", "lon", "elevation_m"], |c, row, _| {
        Ok(DemPoint {
            lat: c.num(row, "lat")?,
            lon: c.num(row, "lon")?,
            elevation: c.num(row, "elevation_m")?,
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseRecord {
    pub timestamp: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    pub value: f64,
}

/// A parsed coarse-field file: `timestamp,lat,lon,<var>`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseFile {
    pub variable: String,
    pub parsed: Parsed<CoarseRecord>,
}

pub fn parse_coarse<R: Read>(mut input: R) -> Result<CoarseFile> {
    let mut data = Vec::new();
    input.read_to_end(&mut data).map_err(|e| Error::io("coarse", e))?;
    let headers = reader(data.as_slice()).headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let variable = match names.as_slice() {
        ["timestamp", "lat", "lon", var] => var.to_string(),
        _ => {
            return Err(Error::Schema {
                file: "coarse".into(),
                reason: format!("expected header timestamp,lat,lon,<var>, got {}", names.join(",")),
            })
        }
    };
    let var = variable.clone();
    let parsed = parse_rows(&variable, data.as_slice(), &["timestamp", "lat", "lon"], |c, row, _| {
        Ok(CoarseRecord {
            timestamp: c.time(row, "timestamp")?,
            lat: c.num(row, "lat")?,
            lon: c.num(row, "lon")?,
            value: c.num(row, &var)?,
        })
    })?;
    Ok(CoarseFile { variable, parsed })
}

/// A coarse variable on its own regular lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseSeries {
    pub variable: String,
    pub grid: Grid,
    pub series: TimeSeriesField,
}

fn unique_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    v
}

/// Arranges point records into a regular lattice of frames. Every lattice
/// point must be present at every timestamp.
pub fn coarse_to_series(file: &CoarseFile) -> Result<CoarseSeries> {
    let recs = &file.parsed.records;
    if recs.is_empty() {
        return Err(Error::Input(format!("coarse file '{}' has no records", file.variable)));
    }
    let mut lats = unique_sorted(recs.iter().map(|r| r.lat).collect());
    lats.reverse();
    let lons = unique_sorted(recs.iter().map(|r| r.lon).collect());
    let mut times: Vec<DateTime<Utc>> = recs.iter().map(|r| r.timestamp).collect();
    times.sort();
    times.dedup();
    let step = |v: &[f64]| if v.len() >= 2 { (v[0] - v[1]).abs() } else { 0.0 };
    let cell = if lats.len() >= 2 { step(&lats) } else { step(&lons) };
    let regular = |v: &[f64]| v.windows(2).all(|w| ((w[1] - w[0]).abs() - cell).abs() < 1e-6);
    if !(cell > 0.0) || !regular(&lats) || !regular(&lons) {
        return Err(Error::Input(format!(
            "coarse file '{}' is not on a regular lattice",
            file.variable
        )));
    }
    if let Some(w) = times.windows(2).find(|w| w[1] - w[0] != times[1] - times[0]) {
        return Err(Error::Assembly(format!(
            "coarse field '{}' has a time gap between {} and {}",
            file.variable,
            format_timestamp(w[0]),
            format_timestamp(w[1])
        )));
    }
    let grid = make_grid(GridSpec::from_centres(lats[0], lons[0], lats.len(), lons.len(), cell))?;
    let t_index: HashMap<DateTime<Utc>, usize> = times.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let mut frames = vec![GriddedField::new(grid.n_lat, grid.n_lon, file.variable.clone()); times.len()];
    for r in recs {
        let row = ((lats[0] - r.lat) / cell).round() as usize;
        let col = ((r.lon - lons[0]) / cell).round() as usize;
        frames[t_index[&r.timestamp]].set(row, col, r.value);
    }
    for (t, f) in times.iter().zip(&frames) {
        if f.valid.iter().any(|v| !v) {
            return Err(Error::Input(format!(
                "coarse file '{}' is missing lattice points at {t}",
                file.variable
            )));
        }
    }
    Ok(CoarseSeries {
        variable: file.variable.clone(),
        grid,
        series: TimeSeriesField::new(times, frames)?,
    })
}

pub fn read_catalog(path: &Path) -> Result<Parsed<StationMeta>> {
    parse_catalog(open(path)?)
}

pub fn read_observations(path: &Path) -> Result<Parsed<ObservationRecord>> {
    parse_observations(open(path)?)
}

pub fn read_corrections(path: &Path) -> Result<Parsed<CorrectionRule>> {
    parse_corrections(open(path)?)
}

pub fn read_dem(path: &Path) -> Result<Parsed<DemPoint>> {
    parse_dem(open(path)?)
}

pub fn read_coarse(path: &Path) -> Result<CoarseFile> {
    parse_coarse(open(path)?).map_err(|e| match e {
        Error::Schema { reason, .. } => Error::Schema {
            file: file_label(path),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;

    fn ts(y: i32, m: u32, d: u32, h: u32, min: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, min, 0).unwrap()
    }

    #[test]
    fn north_wind_blows_south() {
        let (u, v) = wind_to_uv(10.0, 0.0).unwrap();
        assert!(u.abs() < 1e-12 && (v + 10.0).abs() < 1e-12);
    }

    #[test]
    fn west_wind_blows_east() {
        let (u, v) = wind_to_uv(10.0, 270.0).unwrap();
        assert!((u - 10.0).abs() < 1e-12 && v.abs() < 1e-12);
    }

    #[test]
    fn negative_speed_rejected() {
        assert!(wind_to_uv(-1.0, 10.0).is_err());
    }

    #[test]
    fn calm_and_inverse_cases() {
        assert_eq!(uv_to_wind(0.0, 0.0), (0.0, 0.0));
        let (s, d) = uv_to_wind(0.0, -10.0);
        assert_eq!(s, 10.0);
        assert!(d.abs() < 1e-12);
        let (s, d) = uv_to_wind(3.0, 4.0);
        assert_eq!(s, 5.0);
        let expect = (-3.0f64).atan2(-4.0).to_degrees().rem_euclid(360.0);
        assert!((d - expect).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn wind_round_trip(s in 0.01f64..150.0, d in 0.0f64..359.999) {
            let (u, v) = wind_to_uv(s, d).unwrap();
            let (s2, d2) = uv_to_wind(u, v);
            prop_assert!((s2 - s).abs() < 1e-9);
            let dd = (d2 - d).abs();
            prop_assert!(dd.min(360.0 - dd) < 1e-9);
            prop_assert!((u.hypot(v) - s).abs() < 1e-9);
        }

        #[test]
        fn time_feature_pairs_on_unit_circle(secs in 1_600_000_000i64..1_800_000_000) {
            let t = DateTime::from_timestamp(secs - secs % 900, 0).unwrap();
            let f = time_features(t);
            for (s, c) in [(f.sin_month, f.cos_month), (f.sin_hour, f.cos_hour), (f.sin_doy, f.cos_doy)] {
                prop_assert!((s * s + c * c - 1.0).abs() <= 1e-12);
            }
            let later = time_features(t + Duration::hours(24));
            prop_assert!((later.sin_hour - f.sin_hour).abs() < 1e-12);
            prop_assert!((later.cos_hour - f.cos_hour).abs() < 1e-12);
        }
    }

    #[test]
    fn time_feature_anchors() {
        let f = time_features(ts(2022, 5, 17, 0, 0));
        assert_eq!((f.sin_hour, f.cos_hour), (0.0, 1.0));
        let f = time_features(ts(2022, 5, 17, 6, 0));
        assert!((f.sin_hour - 1.0).abs() < 1e-12 && f.cos_hour.abs() <= 1e-12);
        let f = time_features(ts(2023, 1, 1, 12, 0));
        assert_eq!((f.sin_month, f.cos_month, f.sin_doy, f.cos_doy), (0.0, 1.0, 0.0, 1.0));
        let a = time_features(ts(2022, 3, 10, 0, 0));
        let b = time_features(ts(2023, 3, 10, 0, 0));
        assert_eq!((a.sin_month, a.cos_month), (b.sin_month, b.cos_month));
    }

    fn record(id: &str, t: DateTime<Utc>) -> ObservationRecord {
        ObservationRecord {
            station_id: id.into(),
            timestamp: t,
            temperature: Some(20.0),
            humidity: Some(50.0),
            wind3_speed: Some(10.0),
            wind3_dir: Some(45.0),
            wind10_speed: Some(12.0),
            wind10_dir: Some(50.0),
        }
    }

    #[test]
    fn rotation_rule_adds_clockwise() {
        let t = ts(2022, 1, 1, 0, 0);
        let rule = CorrectionRule {
            station_id: "PM".into(),
            action: CorrectionAction::Rotate {
                field: DirectionField::Wind3Dir,
                degrees: 90.0,
            },
            active_from: t,
            active_to: t + Duration::days(1),
        };
        let (out, warnings) = apply_corrections(vec![record("PM", t)], &[rule]);
        assert!(warnings.is_empty());
        assert_eq!(out[0].wind3_dir, Some(135.0));
        assert_eq!(out[0].wind10_dir, Some(50.0));
    }

    #[test]
    fn rotation_wraps_modulo_360() {
        let t = ts(2022, 1, 1, 0, 0);
        let mut rec = record("PM", t);
        rec.wind3_dir = Some(300.0);
        let rule = CorrectionRule {
            station_id: "PM".into(),
            action: CorrectionAction::Rotate {
                field: DirectionField::Wind3Dir,
                degrees: 90.0,
            },
            active_from: t,
            active_to: t + Duration::minutes(15),
        };
        let (out, _) = apply_corrections(vec![rec], &[rule]);
        assert_eq!(out[0].wind3_dir, Some(30.0));
    }

    #[test]
    fn empty_rules_are_identity() {
        let recs: Vec<_> = (0..10).map(|i| record("A", ts(2022, 1, 1, 0, 0) + Duration::minutes(15 * i))).collect();
        let (out, _) = apply_corrections(recs.clone(), &[]);
        assert_eq!(out, recs);
    }

    #[test]
    fn drop_labels_only_inside_range() {
        let start = ts(2022, 4, 1, 0, 0);
        let recs: Vec<_> = (0..96)
            .flat_map(|i| {
                let t = start + Duration::minutes(15 * i);
                [record("NY002", t), record("OTHER", t)]
            })
            .collect();
        let (from, to) = (start + Duration::hours(6), start + Duration::hours(12));
        let rule = CorrectionRule {
            station_id: "NY002".into(),
            action: CorrectionAction::DropLabels,
            active_from: from,
            active_to: to,
        };
        let (out, _) = apply_corrections(recs.clone(), &[rule]);
        for (before, after) in recs.iter().zip(&out) {
            let inside = after.station_id == "NY002" && after.timestamp >= from && after.timestamp < to;
            if inside {
                assert_eq!((after.wind10_speed, after.wind10_dir), (None, None));
                assert_eq!(after.wind3_dir, before.wind3_dir);
            } else {
                assert_eq!(after, before);
            }
        }
    }

    #[test]
    fn unknown_station_rule_warns_and_skips() {
        let t = ts(2022, 1, 1, 0, 0);
        let rule = CorrectionRule {
            station_id: "NOPE".into(),
            action: CorrectionAction::DropLabels,
            active_from: t,
            active_to: t + Duration::days(1),
        };
        let recs = vec![record("A", t)];
        let (out, warnings) = apply_corrections(recs.clone(), &[rule]);
        assert_eq!(out, recs);
        assert_eq!(warnings.len(), 1);
    }

    const OBS_HEADER: &str =
        "station_id,timestamp,temp_c,humidity_pct,wind3_speed_kmh,wind3_dir_deg,wind10_speed_kmh,wind10_dir_deg\n";

    #[test]
    fn header_only_file_is_empty() {
        let p = parse_observations(OBS_HEADER.as_bytes()).unwrap();
        assert!(p.records.is_empty() && p.rejects.is_empty());
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = parse_observations("station_id,timestamp,temp_c\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
    }

    #[test]
    fn direction_360_wraps_with_warning() {
        let csv = format!("{OBS_HEADER}A,2022-01-01T00:00:00Z,20,50,10,360,,\n");
        let p = parse_observations(csv.as_bytes()).unwrap();
        assert_eq!(p.records[0].wind3_dir, Some(0.0));
        assert_eq!(p.records[0].wind10_speed, None);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn one_malformed_row_among_hundred() {
        let mut csv = OBS_HEADER.to_string();
        let t0 = ts(2022, 1, 1, 0, 0);
        for i in 0..100 {
            let t = format_timestamp(t0 + Duration::minutes(15 * i));
            if i == 42 {
                csv.push_str(&format!("A,{t},20,fifty,10,90,,\n"));
            } else {
                csv.push_str(&format!("A,{t},20,50,10,90,12,95\n"));
            }
        }
        let p = parse_observations(csv.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 99);
        assert_eq!(p.rejects.len(), 1);
        assert_eq!(p.rejects[0].line, 44);
    }

    #[test]
    fn off_tick_and_negative_speed_rejected() {
        let csv = format!(
            "{OBS_HEADER}A,2022-01-01T00:07:00Z,20,50,10,90,,\nA,2022-01-01T00:15:00Z,20,50,-3,90,,\n"
        );
        let p = parse_observations(csv.as_bytes()).unwrap();
        assert!(p.records.is_empty());
        assert_eq!(p.rejects.len(), 2);
    }

    #[test]
    fn catalog_and_corrections_parse() {
        let cat = parse_catalog("station_id,lat,lon,has_10m\nA,-32.5,116.1,1\nB,-33,117,0\nA,-33,117,0\n".as_bytes()).unwrap();
        assert_eq!(cat.records.len(), 2);
        assert!(cat.records[0].has_10m_labels);
        assert_eq!(cat.rejects.len(), 1);

        let rules = parse_corrections(
            "station_id,field,rotation_deg,drop_labels,active_from,active_to\n\
             PM,wind3_dir,90,0,2022-01-01T00:00:00Z,2025-01-01T00:00:00Z\n\
             NY002,,,1,2022-04-01T00:00:00Z,2025-01-01T00:00:00Z\n\
             X,wind3_dir,90,0,2023-01-01T00:00:00Z,2022-01-01T00:00:00Z\n"
                .as_bytes(),
        )
        .unwrap();
        assert_eq!(rules.records.len(), 2);
        assert_eq!(rules.records[1].action, CorrectionAction::DropLabels);
        assert_eq!(rules.rejects.len(), 1);
    }

    #[test]
    fn coarse_file_becomes_lattice_series() {
        let mut csv = "timestamp,lat,lon,u10\n".to_string();
        for h in 0..3 {
            for lat in [-32.0, -32.25, -32.5] {
                for lon in [115.0, 115.25] {
                    csv.push_str(&format!("2022-01-01T0{h}:00:00Z,{lat},{lon},{}\n", lat + lon + h as f64));
                }
            }
        }
        let file = parse_coarse(csv.as_bytes()).unwrap();
        assert_eq!(file.variable, "u10");
        let s = coarse_to_series(&file).unwrap();
        assert_eq!((s.grid.n_lat, s.grid.n_lon), (3, 2));
        assert_eq!(s.series.frames.len(), 3);
        assert!((s.grid.lat_centres[2] + 32.5).abs() < 1e-9);
        assert_eq!(s.series.frames[2].get(1, 1), -32.25 + 115.25 + 2.0);
    }

    #[test]
    fn coarse_time_gap_is_named() {
        let mut csv = "timestamp,lat,lon,msl\n".to_string();
        for h in [0, 1, 3] {
            for lat in [-32.0, -32.25] {
                for lon in [115.0, 115.25] {
                    csv.push_str(&format!("2022-01-01T0{h}:00:00Z,{lat},{lon},1000\n"));
                }
            }
        }
        let err = coarse_to_series(&parse_coarse(csv.as_bytes()).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Assembly(ref m) if m.contains("01:00:00Z") && m.contains("03:00:00Z")), "{err}");
    }

    #[test]
    fn coarse_header_must_have_one_variable() {
        assert!(matches!(
            parse_coarse("timestamp,lat,lon,u10,v10\n".as_bytes()),
            Err(Error::Schema { .. })
        ));
    }
}
