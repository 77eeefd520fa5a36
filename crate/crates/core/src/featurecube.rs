//! The 14-channel gridded feature cube, the calendar train/test split and
//! sliding sample windows.
//!
//! Window layout for a start index `t0` (all offsets in 15-minute steps):
//!
//! ```text
//! x: t0 .. t0+D+F-1     observation channels zeroed from offset D on
//! y: t0+M .. t0+M+D+F-1 labels at station cells only
//! ```
//!
//! The forecast is issued at the last observed frame, `t0+D-1`, so the
//! positive horizons of a window are `1..=F+M` steps.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDate, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use windcast_tensor::{parallel, Tensor};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geogrid::{bin_point, make_grid, CellIndex, Grid, GridSpec, GriddedField, TimeSeriesField};
use crate::ingest::{format_timestamp, time_features, ObservationRecord, StationMeta};

pub const FEATURE_NAMES: [&str; 14] = [
    "T", "H", "u3", "v3", "u10f", "v10f", "msl", "dem", "sin_month", "cos_month", "sin_hour", "cos_hour",
    "sin_doy", "cos_doy",
];
pub const N_FEATURES: usize = FEATURE_NAMES.len();

/// Channel indices into the cube.
pub mod channel {
    pub const T: usize = 0;
    pub const H: usize = 1;
    pub const U3: usize = 2;
    pub const V3: usize = 3;
    pub const U10F: usize = 4;
    pub const V10F: usize = 5;
    pub const MSL: usize = 6;
    pub const DEM: usize = 7;
    /// First of the six calendar channels.
    pub const TIME: usize = 8;
}

/// Channels that are unknown after the issue time.
pub const OBSERVATION_CHANNELS: [usize; 4] = [channel::T, channel::H, channel::U3, channel::V3];

pub const STEP_SECONDS: i64 = 900;

pub fn step() -> Duration {
    Duration::seconds(STEP_SECONDS)
}

/// A station carrying 10 m labels and the cell it was binned to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStation {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub cell: CellIndex,
}

/// Dense `(feature, time, lat, lon)` array plus station labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCube {
    pub grid: Grid,
    pub times: Vec<DateTime<Utc>>,
    pub data: Vec<f32>,
    pub label_stations: Vec<LabelStation>,
    /// `(component, time, station)` with components `u10, v10`.
    pub labels: Vec<f32>,
    pub label_valid: Vec<bool>,
}

impl FeatureCube {
    /// All-zero cube with no valid labels.
    pub fn blank(grid: Grid, start: DateTime<Utc>, n_times: usize, label_stations: Vec<LabelStation>) -> Self {
        let n_st = label_stations.len();
        Self {
            times: (0..n_times).map(|k| start + step() * k as i32).collect(),
            data: vec![0.0; N_FEATURES * n_times * grid.n_cells()],
            labels: vec![0.0; 2 * n_times * n_st],
            label_valid: vec![false; 2 * n_times * n_st],
            grid,
            label_stations,
        }
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn plane(&self) -> usize {
        self.grid.n_cells()
    }

    fn frame_offset(&self, c: usize, t: usize) -> usize {
        (c * self.n_times() + t) * self.plane()
    }

    pub fn frame(&self, c: usize, t: usize) -> &[f32] {
        let o = self.frame_offset(c, t);
        &self.data[o..o + self.plane()]
    }

    pub fn frame_mut(&mut self, c: usize, t: usize) -> &mut [f32] {
        let o = self.frame_offset(c, t);
        let p = self.plane();
        &mut self.data[o..o + p]
    }

    pub fn value(&self, c: usize, t: usize, cell: CellIndex) -> f32 {
        self.frame(c, t)[cell.row * self.grid.n_lon + cell.col]
    }

    pub fn label_index(&self, comp: usize, t: usize, station: usize) -> usize {
        (comp * self.n_times() + t) * self.label_stations.len() + station
    }

    /// The 10 m label `(u, v)` of a station at a time, if valid.
    pub fn label(&self, t: usize, station: usize) -> Option<(f32, f32)> {
        let (iu, iv) = (self.label_index(0, t, station), self.label_index(1, t, station));
        (self.label_valid[iu] && self.label_valid[iv]).then(|| (self.labels[iu], self.labels[iv]))
    }

    pub fn time_index(&self, t: DateTime<Utc>) -> Option<usize> {
        let first = *self.times.first()?;
        let secs = (t - first).num_seconds();
        (secs >= 0 && secs % STEP_SECONDS == 0)
            .then(|| (secs / STEP_SECONDS) as usize)
            .filter(|&k| k < self.n_times())
    }

    fn check(&self) -> Result<()> {
        let n_st = self.label_stations.len();
        let ok = self.data.len() == N_FEATURES * self.n_times() * self.plane()
            && self.labels.len() == 2 * self.n_times() * n_st
            && self.label_valid.len() == self.labels.len();
        if !ok {
            return Err(Error::Format("cube arrays do not match its dimensions".into()));
        }
        Ok(())
    }
}

/// Forecast fields already regridded to the target grid at the cube step.
#[derive(Debug, Clone)]
pub struct ForecastFields {
    pub u10f: TimeSeriesField,
    pub v10f: TimeSeriesField,
    pub msl: TimeSeriesField,
}

/// `n_steps` ticks from `start` at the cube step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeRange {
    pub start: DateTime<Utc>,
    pub n_steps: usize,
}

impl TimeRange {
    /// Inclusive of both ends.
    pub fn between(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self> {
        let secs = (end - start).num_seconds();
        if secs < 0 || secs % STEP_SECONDS != 0 {
            return Err(Error::Config(format!(
                "time range {} .. {} is not a whole number of 15-minute steps",
                format_timestamp(start),
                format_timestamp(end)
            )));
        }
        Ok(Self {
            start,
            n_steps: (secs / STEP_SECONDS) as usize + 1,
        })
    }

    pub fn time(&self, k: usize) -> DateTime<Utc> {
        self.start + step() * k as i32
    }
}

/// What assembly dropped or overrode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssemblyReport {
    pub outside_grid: Vec<String>,
    /// `(shadowed, kept)` pairs from cell collisions.
    pub shadowed: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl AssemblyReport {
    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Keeps, per cell, the station nearest the centre; ties go to the smaller id.
fn resolve_cells<'a>(
    stations: impl Iterator<Item = &'a StationMeta>,
    grid: &Grid,
    report: &mut AssemblyReport,
) -> BTreeMap<CellIndex, &'a StationMeta> {
    let mut by_cell: BTreeMap<CellIndex, Vec<&StationMeta>> = BTreeMap::new();
    for s in stations {
        match bin_point(s.lat, s.lon, grid) {
            Ok(cell) => by_cell.entry(cell).or_default().push(s),
            Err(_) => {
                if !report.outside_grid.contains(&s.station_id) {
                    report.outside_grid.push(s.station_id.clone());
                    report.warn(format!("station {} at ({}, {}) lies outside the grid; excluded", s.station_id, s.lat, s.lon));
                }
            }
        }
    }
    by_cell
        .into_iter()
        .map(|(cell, mut group)| {
            group.sort_by(|a, b| {
                let da = grid.dist2(a.lat, a.lon, cell.row, cell.col);
                let db = grid.dist2(b.lat, b.lon, cell.row, cell.col);
                da.total_cmp(&db).then_with(|| a.station_id.cmp(&b.station_id))
            });
            for loser in &group[1..] {
                report.shadowed.push((loser.station_id.clone(), group[0].station_id.clone()));
                report.warn(format!(
                    "station {} shares cell ({}, {}) with nearer station {}; shadowed",
                    loser.station_id, cell.row, cell.col, group[0].station_id
                ));
            }
            (cell, group[0])
        })
        .collect()
}

fn forecast_frame<'a>(name: &str, series: &'a TimeSeriesField, t: DateTime<Utc>, grid: &Grid) -> Result<&'a GriddedField> {
    let missing = || Error::Assembly(format!("forecast field {name} has no frame at {}", format_timestamp(t)));
    let first = *series.times.first().ok_or_else(missing)?;
    let k = match series.step() {
        Some(st) => {
            let off = (t - first).num_seconds();
            if off < 0 || off % st.num_seconds() != 0 {
                return Err(missing());
            }
            (off / st.num_seconds()) as usize
        }
        None if t == first => 0,
        None => return Err(missing()),
    };
    let frame = series.frames.get(k).ok_or_else(missing)?;
    if frame.n_lat != grid.n_lat || frame.n_lon != grid.n_lon {
        return Err(Error::Assembly(format!(
            "forecast field {name} is {}x{}, grid is {}x{}",
            frame.n_lat, frame.n_lon, grid.n_lat, grid.n_lon
        )));
    }
    Ok(frame)
}

fn fill_from(dst: &mut [f32], field: &GriddedField) {
    for ((d, v), ok) in dst.iter_mut().zip(&field.values).zip(&field.valid) {
        *d = if *ok { *v as f32 } else { 0.0 };
    }
}

/// Builds the cube. Observation channels hold each station's reading in its
/// nearest cell and zero elsewhere or when absent.
pub fn assemble_cube(
    obs: &[ObservationRecord],
    stations: &[StationMeta],
    forecast: &ForecastFields,
    dem: &GriddedField,
    grid: &Grid,
    range: TimeRange,
) -> Result<(FeatureCube, AssemblyReport)> {
    if range.n_steps == 0 {
        return Err(Error::Assembly("empty time range".into()));
    }
    if dem.n_lat != grid.n_lat || dem.n_lon != grid.n_lon {
        return Err(Error::Assembly("terrain field does not match the grid".into()));
    }
    let mut report = AssemblyReport::default();
    let obs_cells = resolve_cells(stations.iter(), grid, &mut report);
    let mut label_report = AssemblyReport::default();
    let label_cells = resolve_cells(stations.iter().filter(|s| s.has_10m_labels), grid, &mut label_report);
    for pair in label_report.shadowed {
        if !report.shadowed.contains(&pair) {
            report.shadowed.push(pair);
        }
    }

    let mut label_stations: Vec<LabelStation> = label_cells
        .iter()
        .map(|(cell, s)| LabelStation {
            station_id: s.station_id.clone(),
            lat: s.lat,
            lon: s.lon,
            cell: *cell,
        })
        .collect();
    label_stations.sort_by(|a, b| a.station_id.cmp(&b.station_id));

    let mut cube = FeatureCube::blank(grid.clone(), range.start, range.n_steps, label_stations);
    let plane = cube.plane();
    let n_t = range.n_steps;

    let sources = [
        (channel::U10F, "u10f", &forecast.u10f),
        (channel::V10F, "v10f", &forecast.v10f),
        (channel::MSL, "msl", &forecast.msl),
    ];
    for (c, name, series) in sources {
        let frames = (0..n_t)
            .map(|k| forecast_frame(name, series, range.time(k), grid))
            .collect::<Result<Vec<_>>>()?;
        let o = c * n_t * plane;
        parallel::for_each_chunk_mut(&mut cube.data[o..o + n_t * plane], plane, |k, dst| fill_from(dst, frames[k]));
    }
    let o = channel::DEM * n_t * plane;
    parallel::for_each_chunk_mut(&mut cube.data[o..o + n_t * plane], plane, |_, dst| fill_from(dst, dem));
    for k in 0..n_t {
        let feats = time_features(range.time(k)).as_array();
        for (j, v) in feats.iter().enumerate() {
            cube.frame_mut(channel::TIME + j, k).fill(*v as f32);
        }
    }

    let station_cell: HashMap<&str, CellIndex> = obs_cells.iter().map(|(c, s)| (s.station_id.as_str(), *c)).collect();
    let label_slot: HashMap<String, usize> = cube
        .label_stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.station_id.clone(), i))
        .collect();
    let known: HashMap<&str, ()> = stations.iter().map(|s| (s.station_id.as_str(), ())).collect();
    let mut unknown: Vec<&str> = Vec::new();
    let n_lon = grid.n_lon;
    for rec in obs {
        let Some(k) = cube.time_index(rec.timestamp) else { continue };
        let id = rec.station_id.as_str();
        if !known.contains_key(id) {
            if !unknown.contains(&id) {
                unknown.push(id);
            }
            continue;
        }
        if let Some(cell) = station_cell.get(id) {
            let idx = cell.row * n_lon + cell.col;
            let uv = rec.wind3_uv();
            let vals = [rec.temperature, rec.humidity, uv.map(|p| p.0), uv.map(|p| p.1)];
            for (c, v) in OBSERVATION_CHANNELS.iter().zip(vals) {
                cube.frame_mut(*c, k)[idx] = v.unwrap_or(0.0) as f32;
            }
        }
        if let (Some(&s), Some((u, v))) = (label_slot.get(id), rec.wind10_uv()) {
            for (comp, val) in [(0, u), (1, v)] {
                let li = cube.label_index(comp, k, s);
                cube.labels[li] = val as f32;
                cube.label_valid[li] = true;
            }
        }
    }
    for id in unknown {
        report.warn(format!("observations for station {id} missing from the catalog; ignored"));
    }
    if cube.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Assembly("non-finite value in assembled cube".into()));
    }
    Ok((cube, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

pub fn days_in_month(year: i32, month: u32) -> u32 {
    let (ny, nm) = if month == 12 { (year + 1, 1) } else { (year, month + 1) };
    NaiveDate::from_ymd_opt(ny, nm, 1)
        .and_then(|d| d.pred_opt())
        .map_or(31, |d| d.day())
}

/// Test iff the UTC calendar date is one of the last five days of its month.
pub fn split_of(t: DateTime<Utc>) -> Split {
    if t.day() + 5 > days_in_month(t.year(), t.month()) {
        Split::Test
    } else {
        Split::Train
    }
}

pub fn split_train_test(times: &[DateTime<Utc>]) -> Vec<Split> {
    times.iter().map(|t| split_of(*t)).collect()
}

/// Window lengths in 15-minute steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Observed history.
    #[serde(rename = "D")]
    pub d: usize,
    /// Forward extension of the input window.
    #[serde(rename = "F")]
    pub f: usize,
    /// Shift of the label window.
    #[serde(rename = "M")]
    pub m: usize,
    /// Slide between consecutive samples.
    #[serde(rename = "S")]
    pub s: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { d: 192, f: 16, m: 16, s: 1 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.f == 0 || self.m == 0 || self.s == 0 {
            return Err(Error::Config(format!("window sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Time length of x and y.
    pub fn len(&self) -> usize {
        self.d + self.f
    }

    /// Cube steps touched by one sample.
    pub fn span(&self) -> usize {
        self.d + self.f + self.m
    }

    pub fn max_horizon(&self) -> usize {
        self.f + self.m
    }

    /// Horizon in steps of output index `j`; positive values are forecasts.
    pub fn horizon(&self, j: usize) -> i64 {
        (self.m + j) as i64 - (self.d as i64 - 1)
    }
}

/// Start indices whose whole span fits inside `n_times`.
pub fn candidate_starts(n_times: usize, cfg: &WindowConfig) -> Vec<usize> {
    if n_times < cfg.span() {
        return Vec::new();
    }
    (0..=n_times - cfg.span()).step_by(cfg.s.max(1)).collect()
}

/// Which subset a window belongs to, or `None` when it straddles the split.
pub fn classify_window(tags: &[Split], t0: usize, cfg: &WindowConfig) -> Option<Split> {
    let full = &tags[t0..t0 + cfg.span()];
    if full.iter().all(|s| *s == Split::Train) {
        return Some(Split::Train);
    }
    let eval = &tags[t0 + cfg.d..t0 + cfg.span()];
    eval.iter().all(|s| *s == Split::Test).then_some(Split::Test)
}

/// One materialized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub t0_index: usize,
    pub t0: DateTime<Utc>,
    /// `(14, D+F, h, w)`
    pub x: Tensor<f32>,
    /// `(2, D+F, h, w)`, zero away from valid labels.
    pub y: Tensor<f32>,
    pub mask: Vec<bool>,
}

/// Stacked windows ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    pub t0_indices: Vec<usize>,
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    /// 1 at valid label points, else 0.
    pub mask: Tensor<f32>,
}

fn frame_time(cube: &FeatureCube, k: usize) -> DateTime<Utc> {
    cube.times[0] + step() * k as i32
}

/// Input tensor for a start index, with future observations zeroed. Only
/// the input span must lie inside the cube.
pub fn build_input(cube: &FeatureCube, cfg: &WindowConfig, t0: usize) -> Result<Tensor<f32>> {
    cfg.validate()?;
    if t0 + cfg.len() > cube.n_times() {
        return Err(Error::OutOfRange(format!(
            "input window at {} needs {} steps, cube has {} from there",
            format_timestamp(frame_time(cube, t0)),
            cfg.len(),
            cube.n_times().saturating_sub(t0)
        )));
    }
    let (l, plane) = (cfg.len(), cube.plane());
    let mut x = vec![0.0f32; N_FEATURES * l * plane];
    for c in 0..N_FEATURES {
        let observed = if OBSERVATION_CHANNELS.contains(&c) { cfg.d } else { l };
        for j in 0..observed {
            let o = (c * l + j) * plane;
            x[o..o + plane].copy_from_slice(cube.frame(c, t0 + j));
        }
    }
    Ok(Tensor::new(vec![N_FEATURES, l, cube.grid.n_lat, cube.grid.n_lon], x)?)
}

pub fn build_window(cube: &FeatureCube, cfg: &WindowConfig, t0: usize) -> Result<SampleWindow> {
    if t0 + cfg.span() > cube.n_times() {
        return Err(Error::OutOfRange(format!(
            "sample at index {t0} spans {} steps beyond a cube of {}",
            cfg.span(),
            cube.n_times()
        )));
    }
    let x = build_input(cube, cfg, t0)?;
    let (l, plane, n_lon) = (cfg.len(), cube.plane(), cube.grid.n_lon);
    let mut y = vec![0.0f32; 2 * l * plane];
    let mut mask = vec![false; 2 * l * plane];
    for j in 0..l {
        let k = t0 + cfg.m + j;
        for (s, st) in cube.label_stations.iter().enumerate() {
            let cell = st.cell.row * n_lon + st.cell.col;
            for comp in 0..2 {
                let li = cube.label_index(comp, k, s);
                if cube.label_valid[li] {
                    let o = (comp * l + j) * plane + cell;
                    y[o] = cube.labels[li];
                    mask[o] = true;
                }
            }
        }
    }
    Ok(SampleWindow {
        t0_index: t0,
        t0: frame_time(cube, t0),
        x,
        y: Tensor::new(vec![2, l, cube.grid.n_lat, cube.grid.n_lon], y)?,
        mask,
    })
}

/// Windows of one subset, materialized on demand.
#[derive(Debug, Clone)]
pub struct SampleSet<'a> {
    pub cube: &'a FeatureCube,
    pub cfg: WindowConfig,
    pub subset: Split,
    pub starts: Vec<usize>,
}

impl<'a> SampleSet<'a> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn window(&self, i: usize) -> Result<SampleWindow> {
        build_window(self.cube, &self.cfg, self.starts[i])
    }

    /// Stacks the windows at positions `idx` of this set.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let windows = parallel::map_range(idx.len(), |k| self.window(idx[k]));
        let windows = windows.into_iter().collect::<Result<Vec<_>>>()?;
        stack_windows(&windows)
    }

    /// The same set restricted to the given positions.
    pub fn subset_of(&self, idx: &[usize]) -> SampleSet<'a> {
        SampleSet {
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
            ..self.clone()
        }
    }
}

pub fn stack_windows(windows: &[SampleWindow]) -> Result<Batch> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Training("cannot stack an empty batch".into()))?;
    let b = windows.len();
    let mut x = Vec::with_capacity(b * first.x.len());
    let mut y = Vec::with_capacity(b * first.y.len());
    let mut mask = Vec::with_capacity(b * first.y.len());
    for w in windows {
        x.extend_from_slice(w.x.data());
        y.extend_from_slice(w.y.data());
        mask.extend(w.mask.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
    }
    let with_batch = |s: &[usize]| std::iter::once(b).chain(s.iter().copied()).collect::<Vec<_>>();
    Ok(Batch {
        t0_indices: windows.iter().map(|w| w.t0_index).collect(),
        x: Tensor::new(with_batch(first.x.shape()), x)?,
        y: Tensor::new(with_batch(first.y.shape()), y)?,
        mask: Tensor::new(with_batch(first.y.shape()), mask)?,
    })
}

/// All windows of `subset` at stride S. A cube shorter than one span gives
/// an empty set and a warning.
pub fn make_samples<'a>(cube: &'a FeatureCube, cfg: &WindowConfig, subset: Split) -> Result<SampleSet<'a>> {
    cfg.validate()?;
    let tags = split_train_test(&cube.times);
    let starts = candidate_starts(cube.n_times(), cfg);
    if starts.is_empty() {
        warn!(
            "cube of {} steps is shorter than one sample span of {}",
            cube.n_times(),
            cfg.span()
        );
    }
    Ok(SampleSet {
        cube,
        cfg: *cfg,
        subset,
        starts: starts
            .into_iter()
            .filter(|&t0| classify_window(&tags, t0, cfg) == Some(subset))
            .collect(),
    })
}

const CUBE_MAGIC: &[u8; 4] = b"WCUB";
const CUBE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CubeHeader {
    n_features: usize,
    n_times: usize,
    n_lat: usize,
    n_lon: usize,
    feature_names: Vec<String>,
    start: String,
    step_seconds: i64,
    grid: GridSpec,
    label_stations: Vec<LabelStation>,
}

pub fn encode_cube(cube: &FeatureCube) -> Result<Vec<u8>> {
    cube.check()?;
    let start = cube
        .times
        .first()
        .ok_or_else(|| Error::Format("cannot write a cube with no time steps".into()))?;
    let header = CubeHeader {
        n_features: N_FEATURES,
        n_times: cube.n_times(),
        n_lat: cube.grid.n_lat,
        n_lon: cube.grid.n_lon,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        start: format_timestamp(*start),
        step_seconds: STEP_SECONDS,
        grid: cube.grid.spec,
        label_stations: cube.label_stations.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * (cube.data.len() + cube.labels.len()) + cube.label_valid.len() / 8 + 1);
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in cube.data.iter().chain(&cube.labels) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut bits = vec![0u8; cube.label_valid.len().div_ceil(8)];
    for (i, _) in cube.label_valid.iter().enumerate().filter(|(_, v)| **v) {
        bits[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&bits);
    Ok(out)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated cube file: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("cube size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_cube(bytes: &[u8]) -> Result<FeatureCube> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CUBE_MAGIC.as_slice()) {
        return Err(Error::Format("not a cube file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CUBE_VERSION {
        return Err(Error::Format(format!("unsupported cube version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: CubeHeader =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("bad cube header: {e}")))?;
    if header.feature_names != FEATURE_NAMES || header.n_features != N_FEATURES {
        return Err(Error::Format(format!("unexpected feature list {:?}", header.feature_names)));
    }
    if header.step_seconds != STEP_SECONDS {
        return Err(Error::Format(format!("unsupported step of {}s", header.step_seconds)));
    }
    let grid = make_grid(header.grid).map_err(|e| Error::Format(format!("bad grid in cube header: {e}")))?;
    if (grid.n_lat, grid.n_lon) != (header.n_lat, header.n_lon) {
        return Err(Error::Format("grid spec disagrees with cube dimensions".into()));
    }
    let start = crate::ingest::parse_timestamp(&header.start).map_err(Error::Format)?;
    let n_st = header.label_stations.len();
    let n_data = N_FEATURES * header.n_times * grid.n_cells();
    let n_labels = 2 * header.n_times * n_st;
    let data = r.f32s(n_data)?;
    let labels = r.f32s(n_labels)?;
    let bits = r.take(n_labels.div_ceil(8))?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after cube data", bytes.len() - r.pos)));
    }
    let label_valid = (0..n_labels).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    let mut cube = FeatureCube::blank(grid, start, header.n_times, header.label_stations);
    cube.data = data;
    cube.labels = labels;
    cube.label_valid = label_valid;
    Ok(cube)
}

pub fn write_cube(cube: &FeatureCube, path: &Path) -> Result<()> {
    write_atomic(path, &encode_cube(cube)?)
}

pub fn read_cube(path: &Path) -> Result<FeatureCube> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}
