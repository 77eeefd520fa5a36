use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use windcast_core::evaluator::{
    correlation_map, export_area_forecast, write_area_csv, write_station_truth_csv, Source, MAP_HORIZONS_MIN,
    MIN_MAP_POINTS,
};
use windcast_core::featurecube::{candidate_starts, FeatureCube, LabelStation, WindowConfig};
use windcast_core::geogrid::{make_grid, CellIndex, GridSpec};
use windcast_core::ingest::{ObservationRecord, StationMeta};
use windcast_core::pipeline::cube_from_dir;
use windcast_core::synthgen::{generate, truth_predictions, write_bundle, Bundle, ScenarioConfig};
use windcast_core::trainer::Prediction;
use windcast_tensor::Tensor;

const WINDOW: WindowConfig = WindowConfig { d: 16, f: 4, m: 4, s: 1 };

fn scenario(days: u32) -> (Bundle, FeatureCube) {
    let cfg = ScenarioConfig {
        days,
        span_steps: WINDOW.span(),
        ..ScenarioConfig::default()
    };
    let bundle = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&bundle, dir.path()).unwrap();
    let (cube, _) = cube_from_dir(dir.path(), &bundle.grid, None).unwrap();
    (bundle, cube)
}

#[test]
fn perfect_predictor_maps_to_unit_correlation() {
    let (bundle, cube) = scenario(4);
    let starts = candidate_starts(cube.n_times(), &WINDOW);
    let preds = truth_predictions(&bundle.truth, &WINDOW, &starts).unwrap();
    let map = correlation_map(
        &cube,
        &preds,
        &bundle.stations,
        &bundle.observations,
        &MAP_HORIZONS_MIN[..2],
        MIN_MAP_POINTS,
        Source::Model,
    );
    assert!(map.skipped.is_empty(), "{:?}", map.skipped);
    assert_eq!(map.rows.len(), bundle.stations.len() * 2);
    for r in &map.rows {
        assert!((r.r_u - 1.0).abs() <= 1e-6 && (r.r_v - 1.0).abs() <= 1e-6, "{r:?}");
        assert!(r.count >= MIN_MAP_POINTS);
    }
}

#[test]
fn noise_predictor_is_uncorrelated() {
    let (bundle, cube) = scenario(13);
    let starts = candidate_starts(cube.n_times(), &WINDOW);
    let mut preds = truth_predictions(&bundle.truth, &WINDOW, &starts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for p in &mut preds {
        for v in p.values.data_mut() {
            *v = rng.random_range(-25.0..25.0);
        }
    }
    let map = correlation_map(&cube, &preds, &bundle.stations, &bundle.observations, &[120], 1000, Source::Model);
    assert_eq!(map.rows.len(), bundle.stations.len());
    for r in &map.rows {
        assert!(r.count >= 1000);
        assert!(r.r_u.abs() <= 0.1 && r.r_v.abs() <= 0.1, "{r:?}");
    }
}

#[test]
fn constant_and_sparse_stations_are_skipped() {
    let (bundle, cube) = scenario(4);
    let starts = candidate_starts(cube.n_times(), &WINDOW);
    let preds = truth_predictions(&bundle.truth, &WINDOW, &starts).unwrap();
    let st = &bundle.stations[0];
    let flat = StationMeta {
        station_id: "FLAT".into(),
        ..st.clone()
    };
    let sparse = StationMeta {
        station_id: "SPARSE".into(),
        ..st.clone()
    };
    let mut obs: Vec<ObservationRecord> = Vec::new();
    for (i, t) in cube.times.iter().enumerate() {
        let rec = |id: &str, speed: f64| ObservationRecord {
            station_id: id.into(),
            timestamp: *t,
            temperature: None,
            humidity: None,
            wind3_speed: Some(speed),
            wind3_dir: Some(90.0),
            wind10_speed: None,
            wind10_dir: None,
        };
        obs.push(rec("FLAT", 5.0));
        if i % 20 == 0 {
            obs.push(rec("SPARSE", 1.0 + i as f64));
        }
    }
    let map = correlation_map(&cube, &preds, &[flat, sparse], &obs, &[30], MIN_MAP_POINTS, Source::Ecmwf);
    assert!(map.rows.is_empty());
    assert_eq!(map.skipped.len(), 2);
    let flat = map.skipped.iter().find(|s| s.station_id == "FLAT").unwrap();
    assert!(flat.reason.contains("constant") && flat.count >= MIN_MAP_POINTS);
    let sparse = map.skipped.iter().find(|s| s.station_id == "SPARSE").unwrap();
    assert!(sparse.count < MIN_MAP_POINTS);
}

fn one_cell_case() -> (FeatureCube, Prediction) {
    let grid = make_grid(GridSpec::from_centres(-32.05, 115.05, 1, 1, 0.1)).unwrap();
    let start = Utc.with_ymd_and_hms(2022, 3, 1, 0, 0, 0).unwrap();
    let stations = vec![LabelStation {
        station_id: "A".into(),
        lat: -32.04,
        lon: 115.06,
        cell: CellIndex { row: 0, col: 0 },
    }];
    let mut cube = FeatureCube::blank(grid, start, 8, stations);
    for comp in 0..2 {
        let i = cube.label_index(comp, 5, 0);
        cube.labels[i] = [3.0, -4.0][comp];
        cube.label_valid[i] = true;
    }
    let values = Tensor::from_fn(&[2, 4, 1, 1], |i| (i as f32 + 1.0) * 1.234_567_9);
    let pred = Prediction {
        t0: start,
        t0_index: 0,
        issue_time: cube.times[1],
        times: cube.times[2..6].to_vec(),
        horizons: vec![1, 2, 3, 4],
        values,
    };
    (cube, pred)
}

#[test]
fn one_cell_area_export() {
    let (cube, pred) = one_cell_case();
    let (cells, stations) = export_area_forecast(&pred, 3, &cube.grid, &cube);
    assert_eq!(cells.len(), 1);
    assert_eq!(stations.len(), 1);
    assert_eq!((stations[0].u, stations[0].v, stations[0].speed), (3.0, -4.0, 5.0));
    let c = &cells[0];
    assert!((c.speed - c.u.hypot(c.v)).abs() < 1e-12);
    let (_, none) = export_area_forecast(&pred, 0, &cube.grid, &cube);
    assert!(none.is_empty());
}

#[test]
fn area_csv_parses_back_to_the_frame() {
    let (cube, pred) = one_cell_case();
    let (cells, stations) = export_area_forecast(&pred, 2, &cube.grid, &cube);
    let dir = tempfile::tempdir().unwrap();
    let (a, s) = (dir.path().join("area.csv"), dir.path().join("stations.csv"));
    write_area_csv(&a, &cells).unwrap();
    write_station_truth_csv(&s, &[stations.as_slice(), &[]].concat()).unwrap();
    let mut rdr = csv::Reader::from_path(&a).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["lat", "lon", "u", "v", "speed", "dir"]);
    for (row, cell) in rdr.records().zip(&cells) {
        let row = row.unwrap();
        let got: Vec<f64> = row.iter().map(|x| x.parse().unwrap()).collect();
        let want = [cell.lat, cell.lon, cell.u, cell.v, cell.speed, cell.dir];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 5e-9 * w.abs().max(1e-300), "{g} vs {w}");
        }
        let (u, v) = pred.uv(2, 0, 0);
        assert!((got[2] - u as f64).abs() <= 5e-9 * (u as f64).abs());
        assert!((got[3] - v as f64).abs() <= 5e-9 * (v as f64).abs());
    }
    let text = std::fs::read_to_string(&s).unwrap();
    assert!(text.starts_with("station_id,lat,lon,u,v,speed,dir\n"));
}
