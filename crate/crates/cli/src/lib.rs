//! Command implementations behind the `windcast` binary.

pub mod config;

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use windcast_core::abed::{build_model, load_model, save_model, AbedModel};
use windcast_core::evaluator::{
    collect_points, correlation_map, export_area_forecast, stratified_report, write_area_csv,
    write_station_truth_csv, Source, MAP_HORIZONS_MIN, MIN_MAP_POINTS,
};
use windcast_core::featurecube::{make_samples, read_cube, write_cube, FeatureCube, Split, STEP_SECONDS};
use windcast_core::fsutil::{write_atomic, write_csv};
use windcast_core::ingest::{apply_corrections, format_timestamp, parse_timestamp, read_catalog, read_corrections, read_observations};
use windcast_core::pipeline::cube_from_dir;
use windcast_core::synthgen::{generate, write_bundle};
use windcast_core::trainer::{predict, predict_indices, train, Prediction};
use windcast_core::{geogrid::make_grid, selfcheck, Error, Result};

use config::{Overrides, RunConfig};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Parser)]
#[command(name = "windcast", version, about = "Gridded short-range wind forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap; 1 runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic input bundle.
    Synth,
    /// Feature-cube operations.
    Cube {
        #[command(subcommand)]
        action: CubeAction,
    },
    /// Train on the train split of the cube.
    Train,
    /// Forecast from one window start.
    Predict {
        #[arg(long)]
        t0: String,
    },
    /// Stratified metrics on the test split, model against the coarse forecast.
    Eval,
    /// Station correlation maps against 3 m observations.
    Correlate {
        /// Single horizon in minutes; all map horizons when absent.
        #[arg(long)]
        horizon: Option<i64>,
    },
    /// Whole-grid forecast at one horizon, with station truths.
    ExportArea {
        #[arg(long)]
        t0: String,
        #[arg(long)]
        horizon: Option<i64>,
    },
    /// Finite-difference gradient checks in 64-bit.
    Selfcheck,
}

#[derive(Debug, Subcommand)]
pub enum CubeAction {
    /// Assemble the cube from the input bundle.
    Build,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    windcast_tensor::parallel::set_enabled(n > 1);
    #[cfg(feature = "parallel")]
    if n > 1 {
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(EFFECTIVE_CONFIG), cfg.to_toml()?.as_bytes())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} not found: {}", path.display())))
    }
}

fn load_cube(cfg: &RunConfig) -> Result<FeatureCube> {
    let p = cfg.paths.cube();
    require_file(&p, "feature cube")?;
    read_cube(&p)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<AbedModel<f32>> {
    let p = cfg.paths.checkpoint();
    require_file(&p, "trained checkpoint")?;
    let loaded = load_model(&p, Some(&cfg.model))?;
    for w in &loaded.warnings {
        warn!("{w}");
    }
    Ok(loaded.model)
}

fn parse_t0(s: &str) -> Result<DateTime<Utc>> {
    parse_timestamp(s).map_err(|e| Error::Input(format!("--t0: {e}")))
}

fn test_predictions(cfg: &RunConfig, cube: &FeatureCube, model: &AbedModel<f32>) -> Result<Vec<Prediction>> {
    let samples = make_samples(cube, &cfg.window, Split::Test)?;
    if samples.is_empty() {
        return Err(Error::Input("the cube holds no test-split samples".into()));
    }
    info!("forecasting {} test windows", samples.len());
    predict_indices(model, cube, &cfg.window, &samples.starts)
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.global.threads)?;
    let cfg = RunConfig::load(cli.global.config.as_deref())?.resolve(&Overrides {
        seed: cli.global.seed,
        out: cli.global.out.clone(),
    })?;
    match cli.command {
        Command::Synth => synth(&cfg, cli.global.out.is_some()),
        Command::Cube { action: CubeAction::Build } => cube_build(&cfg),
        Command::Train => train_cmd(&cfg),
        Command::Predict { t0 } => predict_cmd(&cfg, &t0),
        Command::Eval => eval_cmd(&cfg),
        Command::Correlate { horizon } => correlate_cmd(&cfg, horizon),
        Command::ExportArea { t0, horizon } => export_area_cmd(&cfg, &t0, horizon),
        Command::Selfcheck => selfcheck_cmd(&cfg),
    }
}

/// Writes to `--out` when given, else to the configured data directory.
fn synth(cfg: &RunConfig, to_out: bool) -> Result<()> {
    let dir = if to_out { &cfg.paths.out } else { &cfg.paths.data };
    let bundle = generate(&cfg.scenario)?;
    write_bundle(&bundle, dir)?;
    echo_config(cfg, dir)?;
    println!(
        "wrote scenario with {} stations and {} reports to {}",
        bundle.stations.len(),
        bundle.observations.len(),
        dir.display()
    );
    Ok(())
}

fn cube_build(cfg: &RunConfig) -> Result<()> {
    let grid = make_grid(cfg.grid)?;
    let (cube, report) = cube_from_dir(&cfg.paths.data, &grid, None)?;
    let path = cfg.paths.cube();
    write_cube(&cube, &path)?;
    echo_config(cfg, &cfg.paths.out)?;
    println!(
        "cube: {} steps, {}x{} cells, {} label stations, {} warnings -> {}",
        cube.n_times(),
        grid.n_lat,
        grid.n_lon,
        cube.label_stations.len(),
        report.warnings.len(),
        path.display()
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let cube = load_cube(cfg)?;
    let samples = make_samples(&cube, &cfg.window, Split::Train)?;
    let model = build_model::<f32>(&cfg.model, cfg.train.seed)?;
    let outcome = train(model, &samples, &cfg.train)?;
    let out = &cfg.paths.out;
    save_model(&outcome.model, &cfg.paths.checkpoint())?;
    outcome.log.write_csv(&out.join("train_log.csv"))?;
    echo_config(cfg, out)?;
    let log = &outcome.log;
    println!(
        "trained {} epochs ({} steps, {:?}); best epoch {} -> {}",
        log.epochs.len(),
        log.steps,
        log.stop_reason,
        log.best_epoch,
        cfg.paths.checkpoint().display()
    );
    Ok(())
}

fn prediction_rows(p: &Prediction) -> Vec<Vec<String>> {
    let s = p.values.shape();
    let (h, w) = (s[2], s[3]);
    let mut rows = Vec::new();
    for (j, &hz) in p.horizons.iter().enumerate().filter(|(_, &hz)| hz > 0) {
        for r in 0..h {
            for c in 0..w {
                let (u, v) = p.uv(j, r, c);
                rows.push(vec![
                    format_timestamp(p.times[j]),
                    (hz * STEP_SECONDS / 60).to_string(),
                    r.to_string(),
                    c.to_string(),
                    format!("{u:.8e}"),
                    format!("{v:.8e}"),
                ]);
            }
        }
    }
    rows
}

fn predict_cmd(cfg: &RunConfig, t0: &str) -> Result<()> {
    let t0 = parse_t0(t0)?;
    let model = load_checkpoint(cfg)?;
    let cube = load_cube(cfg)?;
    let p = predict(&model, &cube, &cfg.window, &[t0])?.remove(0);
    let path = cfg.paths.out.join("forecast.csv");
    write_csv(&path, &["valid_time", "horizon_min", "row", "col", "u10", "v10"], prediction_rows(&p))?;
    echo_config(cfg, &cfg.paths.out)?;
    println!("forecast issued {} -> {}", format_timestamp(p.issue_time), path.display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let model = load_checkpoint(cfg)?;
    let cube = load_cube(cfg)?;
    let preds = test_predictions(cfg, &cube, &model)?;
    let points = collect_points(&cube, &preds, &[Source::Model, Source::Ecmwf]);
    let report = stratified_report(&points, &cfg.strata);
    let path = cfg.paths.out.join("metrics.csv");
    report.write_csv(&path)?;
    echo_config(cfg, &cfg.paths.out)?;
    for source in [Source::Model, Source::Ecmwf] {
        use windcast_core::evaluator::{Metric, Quantity};
        let get = |q, m| {
            report
                .find(source, q, m, None, None, None, None)
                .map_or("n/a".to_string(), |r| format!("{:.4}", r.value))
        };
        println!(
            "{:<6} MAE u {} v {} speed {}  RMSE u {} v {}",
            source.label(),
            get(Quantity::U, Metric::Mae),
            get(Quantity::V, Metric::Mae),
            get(Quantity::Speed, Metric::Mae),
            get(Quantity::U, Metric::Rmse),
            get(Quantity::V, Metric::Rmse)
        );
    }
    println!("{} rows -> {}", report.rows.len(), path.display());
    Ok(())
}

fn correlate_cmd(cfg: &RunConfig, horizon: Option<i64>) -> Result<()> {
    let model = load_checkpoint(cfg)?;
    let cube = load_cube(cfg)?;
    let data = &cfg.paths.data;
    let (cat, obs) = (data.join("stations.csv"), data.join("observations.csv"));
    require_file(&cat, "station catalogue")?;
    require_file(&obs, "observations")?;
    let stations = read_catalog(&cat)?.records;
    let mut records = read_observations(&obs)?.records;
    let corrections = data.join("corrections.csv");
    if corrections.is_file() {
        records = apply_corrections(records, &read_corrections(&corrections)?.records).0;
    }
    let max_min = cfg.window.max_horizon() as i64 * STEP_SECONDS / 60;
    let horizons: Vec<i64> = match horizon {
        Some(h) if h <= 0 || h > max_min || h % (STEP_SECONDS / 60) != 0 => {
            return Err(Error::OutOfRange(format!("horizon {h} min is not a forecast step up to {max_min} min")))
        }
        Some(h) => vec![h],
        None => MAP_HORIZONS_MIN.iter().copied().filter(|h| *h <= max_min).collect(),
    };
    let preds = test_predictions(cfg, &cube, &model)?;
    echo_config(cfg, &cfg.paths.out)?;
    for source in [Source::Model, Source::Ecmwf] {
        let map = correlation_map(&cube, &preds, &stations, &records, &horizons, MIN_MAP_POINTS, source);
        let path = cfg.paths.out.join(format!("correlation_{}.csv", source.label()));
        map.write_csv(&path)?;
        for s in &map.skipped {
            println!("{}: skipped {} at {} min ({})", source.label(), s.station_id, s.horizon_min, s.reason);
        }
        println!("{}: {} station-horizon rows -> {}", source.label(), map.rows.len(), path.display());
    }
    Ok(())
}

fn export_area_cmd(cfg: &RunConfig, t0: &str, horizon: Option<i64>) -> Result<()> {
    let t0 = parse_t0(t0)?;
    let model = load_checkpoint(cfg)?;
    let cube = load_cube(cfg)?;
    let p = predict(&model, &cube, &cfg.window, &[t0])?.remove(0);
    let step_min = STEP_SECONDS / 60;
    let want = horizon.unwrap_or(cfg.window.max_horizon() as i64 * step_min);
    let j = p
        .horizons
        .iter()
        .position(|h| *h > 0 && h * step_min == want)
        .ok_or_else(|| Error::OutOfRange(format!("no forecast step at horizon {want} min")))?;
    let (cells, stations) = export_area_forecast(&p, j, &cube.grid, &cube);
    let out = &cfg.paths.out;
    write_area_csv(&out.join("area_forecast.csv"), &cells)?;
    write_station_truth_csv(&out.join("area_stations.csv"), &stations)?;
    echo_config(cfg, out)?;
    println!(
        "area forecast valid {} (+{want} min): {} cells, {} station truths",
        format_timestamp(p.times[j]),
        cells.len(),
        stations.len()
    );
    Ok(())
}

fn selfcheck_cmd(cfg: &RunConfig) -> Result<()> {
    let results = selfcheck::run(200, cfg.train.seed)?;
    let mut worst = 0.0f64;
    for r in &results {
        worst = worst.max(r.max_rel_error);
        println!(
            "{:<18} max rel error {:.3e} over {:>5} coordinates  {}",
            r.name,
            r.max_rel_error,
            r.coordinates,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if results.iter().all(|r| r.passed()) {
        println!("selfcheck passed: worst {worst:.3e} <= {:.0e}", selfcheck::TOLERANCE);
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: worst {worst:.3e}")))
    }
}
