use geobdl::data::{
    assign_folds, build_dataset, parse_observations, read_observations, write_observations, DatasetConfig, Observation,
};
use geobdl::grid::Raster;
use proptest::prelude::*;

fn hills() -> Raster {
    Raster::from_fn(120, 120, 0.0, 0.0, 50.0, |x, y| {
        200.0 + 0.02 * x + 40.0 * (x / 700.0).sin() * (y / 900.0).cos()
    })
    .unwrap()
}

fn grid_points(n: usize) -> Vec<Observation> {
    (0..n)
        .map(|i| {
            let x = 1500.0 + (i % 30) as f64 * 100.0 + 13.0;
            let y = 1500.0 + (i / 30) as f64 * 100.0 + 7.0;
            Observation {
                id: i,
                easting: x,
                northing: y,
                target: (x / 1000.0).sin() + y / 5000.0,
            }
        })
        .collect()
}

fn cfg(seed: u64) -> DatasetConfig {
    DatasetConfig {
        patch_size: 16,
        patch_cellsize: 50.0,
        folds: 10,
        seed,
    }
}

#[test]
fn na_rows_are_dropped() {
    let mut text = String::from("easting,northing,value\n");
    let mut na = 0;
    for i in 0..100 {
        let v = match i % 14 {
            3 => {
                na += 1;
                "NA".to_string()
            }
            _ => format!("{}", i as f64 * 0.5),
        };
        text.push_str(&format!("{},{},{}\n", 1000 + i, 2000 + i, v));
    }
    let set = parse_observations(&text).unwrap();
    assert_eq!(na, 7);
    assert_eq!(set.observations.len(), 93);
    assert_eq!(set.dropped, 7);
}

#[test]
fn observation_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("obs.csv");
    let obs = grid_points(20);
    write_observations(&path, &obs).unwrap();
    let back = read_observations(&path).unwrap();
    assert_eq!(back.observations, obs);
}

#[test]
fn fold_sizes() {
    let labels = assign_folds(10, 10, 3).unwrap();
    let mut counts = [0; 10];
    labels.iter().for_each(|&f| counts[f] += 1);
    assert_eq!(counts, [1; 10]);

    let labels = assign_folds(109_201, 10, 42).unwrap();
    let mut counts = vec![0usize; 10];
    labels.iter().for_each(|&f| counts[f] += 1);
    assert!(counts.iter().all(|&c| c == 10_920 || c == 10_921));
    assert_eq!(counts.iter().sum::<usize>(), 109_201);
    let test_fold = cfg(42).test_fold();
    assert_eq!(counts[test_fold], 10_920);

    assert_eq!(assign_folds(500, 10, 9).unwrap(), assign_folds(500, 10, 9).unwrap());
    assert!(assign_folds(5, 10, 9).is_err());
    assert!(assign_folds(5, 2, 9).is_err());
}

#[test]
fn split_proportions_and_scaling() {
    let raster = hills();
    let obs = grid_points(900);
    let ds = build_dataset(&obs, &raster, &cfg(5)).unwrap();
    assert_eq!(ds.split.len(), 900);
    assert_eq!((ds.split.train.len(), ds.split.eval.len(), ds.split.test.len()), (720, 90, 90));
    let n = ds.split.train.len() as f64;
    for k in 0..3 {
        let vals: Vec<f64> = ds.split.train.iter().map(|s| s.location_array()[k]).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9, "variable {k}: {mean} {sd}");
    }
    for s in ds.split.train.iter().chain(&ds.split.test) {
        assert!(s.patch.centre_value.abs() < 1e-9);
        assert!(s.patch.values.iter().all(|v| v.is_finite()));
    }
    let mut ids: Vec<usize> = ds.manifest.iter().filter(|r| r.fold.is_some()).map(|r| r.id).collect();
    ids.dedup();
    assert_eq!(ids.len(), 900);
}

#[test]
fn scaler_ignores_held_out_folds() {
    let raster = hills();
    let obs = grid_points(600);
    let ds = build_dataset(&obs, &raster, &cfg(8)).unwrap();
    let held_out: Vec<usize> = ds.split.test.iter().chain(&ds.split.eval).map(|s| s.id).collect();
    let mut altered = obs.clone();
    for &id in &held_out {
        altered[id].easting = 3000.0;
        altered[id].northing = 2500.0;
        altered[id].target = -7.0;
    }
    let ds2 = build_dataset(&altered, &raster, &cfg(8)).unwrap();
    assert_eq!(ds.scaler, ds2.scaler);
}

#[test]
fn dropped_observations_are_reported() {
    let raster = hills();
    let mut obs = grid_points(100);
    obs[4].easting = 10.0;
    obs[9].northing = 5990.0;
    let ds = build_dataset(&obs, &raster, &cfg(1)).unwrap();
    assert_eq!(ds.split.len(), 98);
    let dropped: Vec<_> = ds.manifest.iter().filter(|r| r.fold.is_none()).collect();
    assert_eq!(dropped.len(), 2);
    assert!(dropped.iter().all(|r| r.dropped_reason.as_deref() == Some("outside_support")));
}

#[test]
fn identical_locations_are_degenerate() {
    let raster = hills();
    let obs: Vec<Observation> = (0..30)
        .map(|i| Observation {
            id: i,
            easting: 3000.0,
            northing: 3000.0,
            target: i as f64,
        })
        .collect();
    assert!(build_dataset(&obs, &raster, &cfg(1)).is_err());
}

proptest! {
    #[test]
    fn folds_partition(n in 3usize..400, k in 3usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let labels = assign_folds(n, k, seed).unwrap();
        prop_assert_eq!(labels.len(), n);
        let mut counts = vec![0usize; k];
        for &f in &labels {
            prop_assert!(f < k);
            counts[f] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }
}
