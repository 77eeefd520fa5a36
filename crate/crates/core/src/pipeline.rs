//! Loading an input directory and assembling it into a feature cube.

use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::error::{Error, Result};
use crate::featurecube::{assemble_cube, step, AssemblyReport, FeatureCube, ForecastFields, TimeRange};
use crate::geogrid::{bin_terrain, interp_bilinear, DemPoint, Grid, TimeSeriesField};
use crate::ingest::{
    apply_corrections, coarse_to_series, read_catalog, read_coarse, read_corrections, read_dem, read_observations,
    CoarseSeries, ObservationRecord, Parsed, StationMeta,
};
use crate::synthgen::files;

/// Input file locations; defaults are the bundle names inside one directory.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPaths {
    pub stations: PathBuf,
    pub observations: PathBuf,
    pub corrections: Option<PathBuf>,
    pub dem: PathBuf,
    pub coarse_u10: PathBuf,
    pub coarse_v10: PathBuf,
    pub coarse_msl: PathBuf,
}

impl InputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        let corrections = dir.join("corrections.csv");
        Self {
            stations: dir.join(files::STATIONS),
            observations: dir.join(files::OBSERVATIONS),
            corrections: corrections.exists().then_some(corrections),
            dem: dir.join(files::DEM),
            coarse_u10: dir.join(files::COARSE_U10),
            coarse_v10: dir.join(files::COARSE_V10),
            coarse_msl: dir.join(files::COARSE_MSL),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inputs {
    pub stations: Vec<StationMeta>,
    pub observations: Vec<ObservationRecord>,
    pub dem: Vec<DemPoint>,
    pub u10: CoarseSeries,
    pub v10: CoarseSeries,
    pub msl: CoarseSeries,
    pub warnings: Vec<String>,
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!("missing input file {}", path.display())))
    }
}

fn note<T>(what: &str, parsed: Parsed<T>, warnings: &mut Vec<String>) -> Vec<T> {
    for r in &parsed.rejects {
        let msg = format!("{what}: line {} rejected: {}", r.line, r.reason);
        warn!("{msg}");
        warnings.push(msg);
    }
    warnings.extend(parsed.warnings);
    parsed.records
}

pub fn load_inputs(paths: &InputPaths) -> Result<Inputs> {
    for p in [&paths.stations, &paths.observations, &paths.dem, &paths.coarse_u10, &paths.coarse_v10, &paths.coarse_msl] {
        require(p)?;
    }
    let mut warnings = Vec::new();
    let stations = note("stations", read_catalog(&paths.stations)?, &mut warnings);
    let mut observations = note("observations", read_observations(&paths.observations)?, &mut warnings);
    if let Some(c) = &paths.corrections {
        let rules = note("corrections", read_corrections(c)?, &mut warnings);
        let (fixed, w) = apply_corrections(observations, &rules);
        observations = fixed;
        warnings.extend(w);
    }
    let dem = note("dem", read_dem(&paths.dem)?, &mut warnings);
    let mut coarse = |p: &Path| -> Result<CoarseSeries> {
        let f = read_coarse(p)?;
        for r in &f.parsed.rejects {
            warnings.push(format!("{}: line {} rejected: {}", p.display(), r.line, r.reason));
        }
        coarse_to_series(&f)
    };
    let (u10, v10, msl) = (coarse(&paths.coarse_u10)?, coarse(&paths.coarse_v10)?, coarse(&paths.coarse_msl)?);
    Ok(Inputs {
        stations,
        observations,
        dem,
        u10,
        v10,
        msl,
        warnings,
    })
}

/// Bilinear regridding of every frame, then linear resampling to the cube step.
pub fn regrid_series(coarse: &CoarseSeries, target: &Grid) -> Result<TimeSeriesField> {
    let frames = coarse
        .series
        .frames
        .iter()
        .map(|f| interp_bilinear(&coarse.grid, f, target))
        .collect::<Result<Vec<_>>>()?;
    let spatial = TimeSeriesField::new(coarse.series.times.clone(), frames)?;
    match spatial.step() {
        Some(s) if s == step() => Ok(spatial),
        Some(_) => crate::geogrid::resample_time_linear(&spatial, step()),
        None => Err(Error::Input(format!("coarse field '{}' has a single frame", coarse.variable))),
    }
}

/// Cube over `range`, or over the span of the observations when absent.
pub fn build_cube(inputs: &Inputs, grid: &Grid, range: Option<TimeRange>) -> Result<(FeatureCube, AssemblyReport)> {
    let range = match range {
        Some(r) => r,
        None => {
            let first = inputs.observations.iter().map(|r| r.timestamp).min();
            let last = inputs.observations.iter().map(|r| r.timestamp).max();
            match (first, last) {
                (Some(a), Some(b)) => TimeRange::between(a, b)?,
                _ => return Err(Error::Input("no observations to define the cube period".into())),
            }
        }
    };
    let forecast = ForecastFields {
        u10f: regrid_series(&inputs.u10, grid)?,
        v10f: regrid_series(&inputs.v10, grid)?,
        msl: regrid_series(&inputs.msl, grid)?,
    };
    let dem = bin_terrain(&inputs.dem, grid)?;
    let (cube, mut report) = assemble_cube(&inputs.observations, &inputs.stations, &forecast, &dem, grid, range)?;
    report.warnings.splice(0..0, inputs.warnings.iter().cloned());
    info!(
        "assembled cube: {} steps on {}x{}, {} label stations",
        cube.n_times(),
        grid.n_lat,
        grid.n_lon,
        cube.label_stations.len()
    );
    Ok((cube, report))
}

pub fn cube_from_dir(dir: &Path, grid: &Grid, range: Option<TimeRange>) -> Result<(FeatureCube, AssemblyReport)> {
    build_cube(&load_inputs(&InputPaths::in_dir(dir))?, grid, range)
}
