use windcast_core::abed::{build_model, encode_model, AbedConfig};
use windcast_core::featurecube::{make_samples, Split, WindowConfig};
use windcast_core::geogrid::GridSpec;
use windcast_core::pipeline::cube_from_dir;
use windcast_core::synthgen::{generate, write_bundle, ScenarioConfig};
use windcast_core::trainer::{train, TrainConfig};

const WINDOW: WindowConfig = WindowConfig { d: 16, f: 4, m: 4, s: 1 };

fn one_station_cube(days: u32) -> windcast_core::featurecube::FeatureCube {
    let cfg = ScenarioConfig {
        grid: GridSpec {
            lat_start: -32.0,
            lat_end: -32.8,
            lon_start: 115.0,
            lon_end: 115.8,
            cell_deg: 0.1,
        },
        n_stations: 1,
        n_label_stations: 1,
        days,
        span_steps: WINDOW.span(),
        ..ScenarioConfig::default()
    };
    let bundle = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&bundle, dir.path()).unwrap();
    cube_from_dir(dir.path(), &bundle.grid, None).unwrap().0
}

fn small_model() -> AbedConfig {
    AbedConfig {
        encoder_channels: vec![4, 8],
        n_rssab: 1,
        ..AbedConfig::default()
    }
}

#[test]
fn one_station_overfits_within_budget() {
    let cube = one_station_cube(3);
    let samples = make_samples(&cube, &WINDOW, Split::Train).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        learning_rate: 0.01,
        max_epochs: 500 / samples.len().div_ceil(32).max(1),
        early_stop_patience: 1000,
        ..TrainConfig::default()
    };
    let out = train(build_model(&small_model(), 0).unwrap(), &samples, &cfg).unwrap();
    let log = &out.log;
    assert!(log.steps <= 500);
    let first = log.epochs[0].train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    assert!(last <= 0.01 * first, "final {last:.4e} vs first {first:.4e}");
}

#[test]
fn training_is_reproducible() {
    let cube = one_station_cube(2);
    let samples = make_samples(&cube, &WINDOW, Split::Train).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        learning_rate: 0.01,
        max_epochs: 1,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let out = train(build_model(&small_model(), 3).unwrap(), &samples, &cfg).unwrap();
        let losses: Vec<(f64, f64)> = out.log.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect();
        (encode_model(&out.model).unwrap(), losses)
    };
    assert_eq!(run(), run());
}
