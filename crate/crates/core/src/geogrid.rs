//! Target cell lattice and regridding of point, terrain and coarse gridded data.
//!
//! Rows run north to south and columns west to east: cell `(0, 0)` is the
//! north-west corner. Distances for nearest-neighbour searches are Euclidean
//! in raw degrees, with ties resolved toward the lower row, then lower column.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use windcast_tensor::parallel;

use crate::error::{Error, Result};

const EXTENT_TOL: f64 = 1e-9;

/// Bounds and resolution of a regular lat/lon lattice, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Northern edge.
    pub lat_start: f64,
    /// Southern edge, below `lat_start`.
    pub lat_end: f64,
    /// Western edge.
    pub lon_start: f64,
    pub lon_end: f64,
    pub cell_deg: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lat_start: -32.0,
            lat_end: -35.4,
            lon_start: 115.0,
            lon_end: 118.4,
            cell_deg: 0.1,
        }
    }
}

impl GridSpec {
    /// Spec whose cell centres start at the given north-west centre.
    pub fn from_centres(first_lat: f64, first_lon: f64, n_lat: usize, n_lon: usize, cell_deg: f64) -> Self {
        let half = cell_deg / 2.0;
        Self {
            lat_start: first_lat + half,
            lat_end: first_lat + half - n_lat as f64 * cell_deg,
            lon_start: first_lon - half,
            lon_end: first_lon - half + n_lon as f64 * cell_deg,
            cell_deg,
        }
    }

    fn axis_cells(&self, axis: &str, extent: f64) -> Result<usize> {
        if !(self.cell_deg > 0.0) || !extent.is_finite() {
            return Err(Error::Config(format!("{axis}: cell size must be positive")));
        }
        let n = extent / self.cell_deg;
        let rounded = n.round();
        if extent <= 0.0 || rounded < 1.0 || (n - rounded).abs() * self.cell_deg > EXTENT_TOL {
            return Err(Error::Config(format!(
                "{axis} extent {extent} is not a positive multiple of cell size {}",
                self.cell_deg
            )));
        }
        Ok(rounded as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

/// A validated lattice with precomputed cell centres.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub spec: GridSpec,
    pub n_lat: usize,
    pub n_lon: usize,
    /// Centre latitude per row, strictly decreasing.
    pub lat_centres: Vec<f64>,
    /// Centre longitude per column, strictly increasing.
    pub lon_centres: Vec<f64>,
}

pub fn make_grid(spec: GridSpec) -> Result<Grid> {
    let n_lat = spec.axis_cells("latitude", spec.lat_start - spec.lat_end)?;
    let n_lon = spec.axis_cells("longitude", spec.lon_end - spec.lon_start)?;
    let lat_centres = (0..n_lat)
        .map(|r| spec.lat_start - (r as f64 + 0.5) * spec.cell_deg)
        .collect();
    let lon_centres = (0..n_lon)
        .map(|c| spec.lon_start + (c as f64 + 0.5) * spec.cell_deg)
        .collect();
    Ok(Grid {
        spec,
        n_lat,
        n_lon,
        lat_centres,
        lon_centres,
    })
}

impl Grid {
    pub fn n_cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn centre(&self, cell: CellIndex) -> (f64, f64) {
        (self.lat_centres[cell.row], self.lon_centres[cell.col])
    }

    pub fn flat(&self, cell: CellIndex) -> usize {
        cell.row * self.n_lon + cell.col
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        let s = &self.spec;
        lat <= s.lat_start + EXTENT_TOL
            && lat >= s.lat_end - EXTENT_TOL
            && lon >= s.lon_start - EXTENT_TOL
            && lon <= s.lon_end + EXTENT_TOL
    }

    /// Squared distance from a point to the centre of `(row, col)`.
    #[inline]
    pub fn dist2(&self, lat: f64, lon: f64, row: usize, col: usize) -> f64 {
        let dl = lat - self.lat_centres[row];
        let dn = lon - self.lon_centres[col];
        dl * dl + dn * dn
    }
}

/// Nearest cell centre to a point inside the grid (edges inclusive).
pub fn bin_point(lat: f64, lon: f64, grid: &Grid) -> Result<CellIndex> {
    if !lat.is_finite() || !lon.is_finite() || !grid.contains(lat, lon) {
        return Err(Error::OutOfDomain { lat, lon });
    }
    let s = &grid.spec;
    let r0 = ((s.lat_start - lat) / s.cell_deg).floor() as isize;
    let c0 = ((lon - s.lon_start) / s.cell_deg).floor() as isize;
    let mut best: Option<(f64, CellIndex)> = None;
    for r in (r0 - 1)..=(r0 + 1) {
        if r < 0 || r as usize >= grid.n_lat {
            continue;
        }
        for c in (c0 - 1)..=(c0 + 1) {
            if c < 0 || c as usize >= grid.n_lon {
                continue;
            }
            let cell = CellIndex {
                row: r as usize,
                col: c as usize,
            };
            let d = grid.dist2(lat, lon, cell.row, cell.col);
            // Candidates are visited in (row, col) order, so strict `<` keeps the tie rule.
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, cell));
            }
        }
    }
    best.map(|(_, c)| c).ok_or(Error::OutOfDomain { lat, lon })
}

/// Values on a grid, with a validity mask. Invalid entries hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedField {
    pub n_lat: usize,
    pub n_lon: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub units: String,
}

impl GriddedField {
    pub fn new(n_lat: usize, n_lon: usize, units: impl Into<String>) -> Self {
        Self {
            n_lat,
            n_lon,
            values: vec![0.0; n_lat * n_lon],
            valid: vec![false; n_lat * n_lon],
            units: units.into(),
        }
    }

    pub fn from_fn(grid: &Grid, units: impl Into<String>, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut field = Self::new(grid.n_lat, grid.n_lon, units);
        for r in 0..grid.n_lat {
            for c in 0..grid.n_lon {
                field.values[r * grid.n_lon + c] = f(grid.lat_centres[r], grid.lon_centres[c]);
            }
        }
        field.valid.fill(true);
        field
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_lon + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let i = row * self.n_lon + col;
        self.values[i] = value;
        self.valid[i] = true;
    }

    fn matches(&self, grid: &Grid) -> bool {
        self.n_lat == grid.n_lat && self.n_lon == grid.n_lon
    }
}

/// A sequence of frames at a fixed time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesField {
    pub times: Vec<DateTime<Utc>>,
    pub frames: Vec<GriddedField>,
}

impl TimeSeriesField {
    pub fn new(times: Vec<DateTime<Utc>>, frames: Vec<GriddedField>) -> Result<Self> {
        if times.len() != frames.len() {
            return Err(Error::Input(format!(
                "{} timestamps for {} frames",
                times.len(),
                frames.len()
            )));
        }
        if times.len() >= 2 {
            let step = times[1] - times[0];
            if step <= Duration::zero() || times.windows(2).any(|w| w[1] - w[0] != step) {
                return Err(Error::Input("time axis must be strictly ascending at a fixed step".into()));
            }
        }
        Ok(Self { times, frames })
    }

    pub fn step(&self) -> Option<Duration> {
        (self.times.len() >= 2).then(|| self.times[1] - self.times[0])
    }
}

/// One terrain sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemPoint {
    pub lat: f64,
    pub lon: f64,
    #[serde(rename = "elevation_m")]
    pub elevation: f64,
}

/// Uniform bucket index over scattered points for nearest-point queries.
struct BucketIndex<'a> {
    points: &'a [DemPoint],
    lat0: f64,
    lon0: f64,
    size: f64,
    rows: usize,
    cols: usize,
    buckets: Vec<Vec<u32>>,
}

impl<'a> BucketIndex<'a> {
    fn new(points: &'a [DemPoint], size: f64) -> Self {
        let (mut lat0, mut lat1, mut lon0, mut lon1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in points {
            lat0 = lat0.min(p.lat);
            lat1 = lat1.max(p.lat);
            lon0 = lon0.min(p.lon);
            lon1 = lon1.max(p.lon);
        }
        let rows = ((lat1 - lat0) / size).floor() as usize + 1;
        let cols = ((lon1 - lon0) / size).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); rows * cols];
        for (i, p) in points.iter().enumerate() {
            let r = (((p.lat - lat0) / size).floor() as usize).min(rows - 1);
            let c = (((p.lon - lon0) / size).floor() as usize).min(cols - 1);
            buckets[r * cols + c].push(i as u32);
        }
        Self {
            points,
            lat0,
            lon0,
            size,
            rows,
            cols,
            buckets,
        }
    }

    fn bucket_of(&self, v: f64, origin: f64, n: usize) -> isize {
        (((v - origin) / self.size).floor() as isize).clamp(0, n as isize - 1)
    }

    /// Index of the nearest point; ties go to the lower input index.
    fn nearest(&self, lat: f64, lon: f64) -> usize {
        let qr = self.bucket_of(lat, self.lat0, self.rows);
        let qc = self.bucket_of(lon, self.lon0, self.cols);
        let mut best: Option<(f64, usize)> = None;
        let max_ring = self.rows.max(self.cols) as isize;
        for ring in 0..=max_ring {
            if let Some((bd, _)) = best {
                // Anything in this ring is at least (ring - 1) buckets away.
                let bound = (ring - 1).max(0) as f64 * self.size;
                if bound * bound > bd {
                    break;
                }
            }
            for r in (qr - ring)..=(qr + ring) {
                if r < 0 || r >= self.rows as isize {
                    continue;
                }
                for c in (qc - ring)..=(qc + ring) {
                    if c < 0 || c >= self.cols as isize {
                        continue;
                    }
                    if (r - qr).abs() != ring && (c - qc).abs() != ring {
                        continue;
                    }
                    for &i in &self.buckets[r as usize * self.cols + c as usize] {
                        let p = &self.points[i as usize];
                        let d = (p.lat - lat).powi(2) + (p.lon - lon).powi(2);
                        let cand = (d, i as usize);
                        if best.is_none_or(|b| cand < b) {
                            best = Some(cand);
                        }
                    }
                }
            }
        }
        best.expect("index holds at least one point").1
    }
}

/// Elevation of the terrain sample closest to each cell centre.
pub fn bin_terrain(dem_points: &[DemPoint], grid: &Grid) -> Result<GriddedField> {
    if dem_points.is_empty() {
        return Err(Error::Input("terrain point list is empty".into()));
    }
    let index = BucketIndex::new(dem_points, grid.spec.cell_deg);
    let rows = parallel::map_range(grid.n_lat, |r| {
        (0..grid.n_lon)
            .map(|c| dem_points[index.nearest(grid.lat_centres[r], grid.lon_centres[c])].elevation)
            .collect::<Vec<_>>()
    });
    let mut field = GriddedField::new(grid.n_lat, grid.n_lon, "m");
    field.values = rows.into_iter().flatten().collect();
    field.valid.fill(true);
    Ok(field)
}

/// Fractional index of `v` along centres spaced `step` apart from `first`,
/// clamped to the hull and snapped onto exact centres.
fn hull_position(v: f64, first: f64, step: f64, n: usize) -> (usize, f64) {
    let mut f = ((v - first) / step).clamp(0.0, (n - 1) as f64);
    if (f - f.round()).abs() < 1e-9 {
        f = f.round();
    }
    let i0 = (f.floor() as usize).min(n - 2);
    (i0, f - i0 as f64)
}

/// Bilinear interpolation of a coarse field onto the target cell centres.
///
/// Target centres outside the coarse centre hull are clamped onto it, so
/// coarse data should extend at least one coarse cell beyond the target.
pub fn interp_bilinear(coarse_grid: &Grid, coarse: &GriddedField, target: &Grid) -> Result<GriddedField> {
    if coarse_grid.n_lat < 2 || coarse_grid.n_lon < 2 {
        return Err(Error::Config(format!(
            "bilinear interpolation needs at least 2x2 coarse centres, got {}x{}",
            coarse_grid.n_lat, coarse_grid.n_lon
        )));
    }
    if !coarse.matches(coarse_grid) {
        return Err(Error::Input("coarse field does not match its grid".into()));
    }
    let step = coarse_grid.spec.cell_deg;
    let rows = parallel::map_range(target.n_lat, |r| {
        let (i0, wy) = hull_position(
            coarse_grid.lat_centres[0] - target.lat_centres[r],
            0.0,
            step,
            coarse_grid.n_lat,
        );
        (0..target.n_lon)
            .map(|c| {
                let (j0, wx) = hull_position(
                    target.lon_centres[c],
                    coarse_grid.lon_centres[0],
                    step,
                    coarse_grid.n_lon,
                );
                let idx = |i: usize, j: usize| i * coarse.n_lon + j;
                let corners = [idx(i0, j0), idx(i0, j0 + 1), idx(i0 + 1, j0), idx(i0 + 1, j0 + 1)];
                if corners.iter().any(|&k| !coarse.valid[k]) {
                    return (0.0, false);
                }
                let v = |k: usize| coarse.values[corners[k]];
                let top = if wx == 0.0 { v(0) } else { (1.0 - wx) * v(0) + wx * v(1) };
                let bottom = if wx == 0.0 { v(2) } else { (1.0 - wx) * v(2) + wx * v(3) };
                let value = if wy == 0.0 { top } else { (1.0 - wy) * top + wy * bottom };
                (value, true)
            })
            .collect::<Vec<_>>()
    });
    let mut out = GriddedField::new(target.n_lat, target.n_lon, coarse.units.clone());
    for (k, (v, ok)) in rows.into_iter().flatten().enumerate() {
        out.values[k] = v;
        out.valid[k] = ok;
    }
    Ok(out)
}

/// Per-cell linear interpolation in time onto a finer step dividing the input step.
pub fn resample_time_linear(series: &TimeSeriesField, out_step: Duration) -> Result<TimeSeriesField> {
    if series.frames.len() < 2 {
        return Err(Error::Input("temporal resampling needs at least two frames".into()));
    }
    let in_step = series.step().expect("two frames");
    let (in_s, out_s) = (in_step.num_seconds(), out_step.num_seconds());
    if out_s <= 0 || in_s % out_s != 0 {
        return Err(Error::Config(format!(
            "output step {out_s}s does not divide input step {in_s}s"
        )));
    }
    let ratio = (in_s / out_s) as usize;
    let n_out = (series.frames.len() - 1) * ratio + 1;
    let frames = parallel::map_range(n_out, |k| {
        let (i, j) = (k / ratio, k % ratio);
        let a = &series.frames[i];
        if j == 0 {
            return a.clone();
        }
        let b = &series.frames[i + 1];
        let w = j as f64 / ratio as f64;
        let mut f = GriddedField::new(a.n_lat, a.n_lon, a.units.clone());
        for idx in 0..a.values.len() {
            if a.valid[idx] && b.valid[idx] {
                f.values[idx] = a.values[idx] + w * (b.values[idx] - a.values[idx]);
                f.valid[idx] = true;
            }
        }
        f
    });
    let times = (0..n_out)
        .map(|k| series.times[0] + out_step * k as i32)
        .collect();
    TimeSeriesField::new(times, frames)
}
