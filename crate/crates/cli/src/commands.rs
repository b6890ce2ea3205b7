use std::path::Path;

use geobdl::data::{
    build_dataset, read_observations, write_manifest, write_observations, Dataset, DatasetConfig, ManifestRow,
    Observation, TargetTransform,
};
use geobdl::grid::{read_raster, write_raster, Raster};
use geobdl::metrics::{evaluate, histogram, write_histogram_csv, write_scatter_csv, write_scores_csv};
use geobdl::model::{build_network, describe, ArchConfig};
use geobdl::nn::{Checkpoint, Dtype, Network};
use geobdl::predict::{
    cross_section, observations_near_line, predict_map, write_xsection_csv, BoundingBox, PredictSettings,
};
use geobdl::synth::{make_world, sample_observations, SynthConfig};
use geobdl::train::{train, tune_dropout, TrainConfig, TuneRow};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{
    Command, DataArgs, DtypeArg, EvaluateArgs, IngestArgs, MapArgs, SplitArg, SynthArgs, TrainArgs, XsectionArgs,
};
use crate::error::CliError;
use crate::provenance::{sha256_hex, Outputs};

const DEFAULT_TUNING_RATES: [f64; 3] = [0.05, 0.1, 0.2];

/// Settings stored in a checkpoint so later commands can rebuild the data
/// pipeline exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMetadata {
    dataset: DatasetConfig,
    target_transform: TargetTransform,
    arch: ArchConfig,
    train: TrainConfig,
    tuning: Option<Vec<TuneRow>>,
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Train(a) => cmd_train(&a, false),
        Command::Tune(a) => cmd_train(&a, true),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::PredictMap(a) => cmd_predict_map(&a),
        Command::Xsection(a) => cmd_xsection(&a),
    }
}

fn to_config<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("arguments serialise")
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Reads observations and applies the target transform. Rows outside the
/// transform's domain are reported in the returned manifest rows.
fn load_observations(path: &Path, transform: TargetTransform) -> Result<(Vec<Observation>, Vec<ManifestRow>), CliError> {
    require_file(path, "observations file")?;
    let set = read_observations(path)?;
    let mut kept = Vec::with_capacity(set.observations.len());
    let mut dropped = Vec::new();
    for o in set.observations {
        match transform.apply(o.target) {
            Some(target) => kept.push(Observation { target, ..o }),
            None => dropped.push(ManifestRow {
                id: o.id,
                fold: None,
                dropped_reason: Some("outside_transform_domain".into()),
            }),
        }
    }
    if !dropped.is_empty() {
        log::warn!("dropped {} observations outside the domain of the target transform", dropped.len());
    }
    Ok((kept, dropped))
}

fn load_raster(path: &Path) -> Result<Raster, CliError> {
    require_file(path, "raster")?;
    Ok(read_raster(path)?)
}

fn dataset_config(data: &DataArgs, seed: u64) -> DatasetConfig {
    DatasetConfig {
        patch_size: data.patch_size,
        patch_cellsize: data.patch_cellsize,
        folds: data.folds,
        seed,
    }
}

fn load_dataset(data: &DataArgs, cfg: &DatasetConfig) -> Result<Dataset, CliError> {
    if cfg.patch_size == 0 || !(cfg.patch_cellsize > 0.0) {
        return Err(CliError::Usage("patch size and patch cellsize must be positive".into()));
    }
    if cfg.folds < 3 {
        return Err(CliError::Usage("at least 3 folds are needed for train, eval and test splits".into()));
    }
    let raster = load_raster(&data.raster)?;
    let (obs, extra) = load_observations(&data.observations, data.target_transform)?;
    let mut ds = build_dataset(&obs, &raster, cfg)?;
    ds.manifest.extend(extra);
    ds.manifest.sort_by_key(|r| r.id);
    log::info!(
        "dataset: {} train, {} eval, {} test samples",
        ds.split.train.len(),
        ds.split.eval.len(),
        ds.split.test.len()
    );
    Ok(ds)
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        size: a.size,
        cellsize: a.cellsize,
        flat: a.flat,
        noise_scale: a.noise_scale,
    };
    if !(a.noise_scale >= 0.0 && a.noise_scale.is_finite()) {
        return Err(CliError::Usage("noise scale must be finite and non-negative".into()));
    }
    let world = make_world(a.seed, config)?;
    let obs = sample_observations(&world, a.n, a.seed);
    let out = Outputs::create(&a.out_dir, "synth", to_config(a), a.seed)?;

    let raster_path = out.path("raster.asc");
    write_raster(&world.raster, &raster_path)?;
    out.record(&raster_path)?;
    let obs_path = out.path("observations.csv");
    write_observations(&obs_path, &obs)?;
    out.record(&obs_path)?;

    let b = world.interior();
    let (lo, hi) = world
        .raster
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let n = obs.len().max(1) as f64;
    let tmean = obs.iter().map(|o| o.target).sum::<f64>() / n;
    let tsd = (obs.iter().map(|o| (o.target - tmean).powi(2)).sum::<f64>() / n).sqrt();
    println!("world: {0}x{0} cells of {1}, seed {2}", a.size, a.cellsize, a.seed);
    println!("terrain: min {lo:.1}, max {hi:.1}, sd {:.2}", world.raster.std_dev().unwrap_or(0.0));
    println!("sampling region: {},{},{},{}", b.xmin, b.ymin, b.xmax, b.ymax);
    println!("observations: {} (target mean {tmean:.4}, sd {tsd:.4})", obs.len());
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> Result<(), CliError> {
    let cfg = dataset_config(&a.data, a.seed);
    let ds = load_dataset(&a.data, &cfg)?;
    let out = Outputs::create(&a.out_dir, "ingest", to_config(a), a.seed)?;
    let manifest = out.path("manifest.csv");
    write_manifest(&manifest, &ds.manifest)?;
    out.record(&manifest)?;
    let dropped = ds.manifest.iter().filter(|r| r.fold.is_none()).count();
    let summary = json!({
        "dataset": cfg,
        "train": ds.split.train.len(),
        "eval": ds.split.eval.len(),
        "test": ds.split.test.len(),
        "dropped": dropped,
        "scaler": ds.scaler,
    });
    out.write_text("dataset.json", &(serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n"))?;
    println!(
        "retained {} observations ({} train, {} eval, {} test); dropped {dropped}",
        ds.split.len(),
        ds.split.train.len(),
        ds.split.eval.len(),
        ds.split.test.len()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, tune: bool) -> Result<(), CliError> {
    let arch = ArchConfig {
        patch_size: a.data.patch_size,
        conv_channels: a.conv_channels,
        dense_width: a.dense_width,
        head_widths: a.head_widths.clone(),
        dropout_rate: a.dropout_rate,
        dropout_in_conv: !a.no_conv_dropout,
    };
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        max_epochs: a.max_epochs,
        patience: a.patience,
        dropout_rate: a.dropout_rate,
        seed: a.seed,
        eval_samples: a.eval_samples,
        clip_norm: a.clip_norm,
        freeze_variance: a.freeze_variance,
    };
    cfg.validate()?;
    let spec = build_network(&arch)?;
    let rates: Vec<f64> = match (&a.dropout_rates[..], tune) {
        ([], true) => DEFAULT_TUNING_RATES.to_vec(),
        (r, _) => r.to_vec(),
    };
    let data_cfg = dataset_config(&a.data, a.seed);
    let ds = load_dataset(&a.data, &data_cfg)?;
    let out = Outputs::create(&a.out_dir, if tune { "tune" } else { "train" }, to_config(a), a.seed)?;

    let (outcome, tuning) = if rates.is_empty() {
        (train(&spec, &ds.split, &cfg)?, None)
    } else {
        let t = tune_dropout(&spec, &ds.split, &cfg, &rates)?;
        out.write_text("tuning.csv", &t.to_csv())?;
        println!("selected dropout rate {}", t.best_rate);
        (t.best, Some(t.rows))
    };

    let meta = RunMetadata {
        dataset: data_cfg,
        target_transform: a.data.target_transform,
        arch: ArchConfig {
            dropout_rate: outcome.spec.dropout_rate,
            ..arch
        },
        train: TrainConfig {
            dropout_rate: outcome.spec.dropout_rate,
            ..cfg
        },
        tuning,
    };
    let metadata = serde_json::to_value(&meta).expect("metadata serialises");
    let mut ckpt = Checkpoint::new(outcome.spec.clone(), outcome.weights.clone(), a.seed, Some(ds.scaler), metadata);
    ckpt.header.dtype = match a.dtype {
        DtypeArg::F64 => Dtype::F64,
        DtypeArg::F32 => Dtype::F32,
    };
    let ckpt_path = out.path("checkpoint.gbdl");
    ckpt.save(&ckpt_path)?;
    out.record(&ckpt_path)?;
    let log_path = out.path("trainlog.csv");
    outcome.log.write_csv(&log_path)?;
    out.record(&log_path)?;
    let manifest = out.path("manifest.csv");
    write_manifest(&manifest, &ds.manifest)?;
    out.record(&manifest)?;
    let desc = describe(&outcome.spec)?;
    out.write_text("network.txt", &desc.to_text())?;

    println!("trainable parameters: {}", desc.total_params);
    println!(
        "best epoch {} of {} (eval NLL {:.5}, stopped by {:?})",
        outcome.log.best_epoch,
        outcome.log.epochs.len(),
        outcome.log.best_eval_nll,
        outcome.log.stop_reason
    );
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    net: Network,
    meta: RunMetadata,
    digest: String,
}

fn load_checkpoint(path: &Path) -> Result<Loaded, CliError> {
    require_file(path, "checkpoint")?;
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let ckpt = Checkpoint::decode(&bytes)?;
    let net = Network::new(&ckpt.header.network).map_err(|e| CliError::Data(format!("checkpoint network: {e}")))?;
    net.check_weights(&ckpt.weights)
        .map_err(|e| CliError::Data(format!("checkpoint weights do not match its network: {e}")))?;
    let meta: RunMetadata = serde_json::from_value(ckpt.header.metadata.clone())
        .map_err(|e| CliError::Data(format!("checkpoint lacks run settings: {e}")))?;
    if ckpt.header.scaler.is_none() {
        return Err(CliError::Data("checkpoint lacks input scaling parameters".into()));
    }
    Ok(Loaded {
        ckpt,
        net,
        meta,
        digest: sha256_hex(&bytes),
    })
}

impl Loaded {
    fn scaler(&self) -> geobdl::data::StandardScaler {
        self.ckpt.header.scaler.expect("checked on load")
    }

    fn settings(&self, samples: usize, seed: Option<u64>) -> Result<PredictSettings, CliError> {
        if samples == 0 {
            return Err(CliError::Usage("at least one Monte Carlo sample is required".into()));
        }
        Ok(PredictSettings {
            patch_size: self.meta.dataset.patch_size,
            patch_cellsize: self.meta.dataset.patch_cellsize,
            samples,
            seed: seed.unwrap_or(self.ckpt.header.seed),
        })
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    if a.split == SplitArg::Train && !a.allow_train_eval {
        return Err(CliError::Usage(
            "refusing to score the training folds; pass --allow-train-eval to override".into(),
        ));
    }
    if a.samples == 0 {
        return Err(CliError::Usage("at least one Monte Carlo sample is required".into()));
    }
    if let Some(l) = a.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(CliError::Usage(format!("interval level {l} outside (0, 1)")));
    }
    let loaded = load_checkpoint(&a.checkpoint)?;
    let data = DataArgs {
        raster: a.raster.clone(),
        observations: a.observations.clone(),
        patch_size: loaded.meta.dataset.patch_size,
        patch_cellsize: loaded.meta.dataset.patch_cellsize,
        folds: loaded.meta.dataset.folds,
        target_transform: loaded.meta.target_transform,
    };
    let ds = load_dataset(&data, &loaded.meta.dataset)?;
    if ds.scaler != loaded.scaler() {
        return Err(CliError::Data(
            "raster or observations differ from those the checkpoint was trained on".into(),
        ));
    }
    let samples = match a.split {
        SplitArg::Train => &ds.split.train,
        SplitArg::Eval => &ds.split.eval,
        SplitArg::Test => &ds.split.test,
    };
    let seed = a.seed.unwrap_or(loaded.ckpt.header.seed);
    let ev = evaluate(&loaded.net, &loaded.ckpt.weights, samples, a.samples, seed, &a.levels)?;

    let mut config = to_config(a);
    config["checkpoint_sha256"] = json!(loaded.digest);
    let out = Outputs::create(&a.out_dir, "evaluate", config, seed)?;
    let report = out.path("report.json");
    ev.report.write_json(&report)?;
    out.record(&report)?;
    let scores = out.path("scores.csv");
    write_scores_csv(&scores, &ev.rows)?;
    out.record(&scores)?;
    let scatter = out.path("scatter.csv");
    write_scatter_csv(&scatter, &ev.rows)?;
    out.record(&scatter)?;
    let observed: Vec<f64> = ev.rows.iter().map(|r| r.observed).collect();
    let hist = out.path("histogram.csv");
    write_histogram_csv(&hist, &histogram(&observed, &ev.y_samples, a.bins))?;
    out.record(&hist)?;

    let r = &ev.report;
    println!("n = {}, S = {}", r.n, r.samples);
    println!("R2   {:.4}", r.r2);
    println!("NLL  {:.4}", r.mean_nll);
    println!("CRPS {:.4}", r.mean_crps);
    for (level, frac) in &r.coverage {
        println!("coverage {level}: {frac:.4}");
    }
    Ok(())
}

fn cmd_predict_map(a: &MapArgs) -> Result<(), CliError> {
    let loaded = load_checkpoint(&a.checkpoint)?;
    let raster = load_raster(&a.raster)?;
    let settings = loaded.settings(a.samples, a.seed)?;
    let region = a.region.unwrap_or(BoundingBox {
        xmin: raster.xll,
        ymin: raster.yll,
        xmax: raster.right(),
        ymax: raster.top(),
    });
    if !(region.xmax > region.xmin && region.ymax > region.ymin) {
        return Err(CliError::Usage("the prediction region has zero area".into()));
    }
    let cellsize = a.cellsize.unwrap_or(raster.cellsize);
    if !(cellsize > 0.0) {
        return Err(CliError::Usage("output cellsize must be positive".into()));
    }
    if a.products.is_empty() {
        return Err(CliError::Usage("no products requested".into()));
    }
    let maps = predict_map(
        &loaded.net,
        &loaded.ckpt.weights,
        &raster,
        &loaded.scaler(),
        &settings,
        region,
        cellsize,
        &a.products,
    )?;
    let first = &maps[0].1;
    if first.values.iter().all(|&v| first.is_nodata(v)) {
        return Err(CliError::Data("the region lies outside the raster's extractable support".into()));
    }

    let mut config = to_config(a);
    config["checkpoint_sha256"] = json!(loaded.digest);
    let out = Outputs::create(&a.out_dir, "predict-map", config, settings.seed)?;
    let mut files = Vec::new();
    for (product, grid) in &maps {
        let name = format!("{}.asc", product.file_stem());
        let path = out.path(&name);
        write_raster(grid, &path)?;
        out.record(&path)?;
        files.push(json!({ "product": product.to_string(), "file": name }));
    }
    let meta = json!({
        "samples": settings.samples,
        "dropout_rate": loaded.ckpt.header.dropout_rate,
        "seed": settings.seed,
        "region": region,
        "cellsize": cellsize,
        "target_transform": loaded.meta.target_transform,
        "products": files,
        "config_hash": out.config_hash(),
    });
    out.write_text("metadata.json", &(serde_json::to_string_pretty(&meta).expect("metadata serialises") + "\n"))?;
    let filled = first.values.iter().filter(|&&v| !first.is_nodata(v)).count();
    println!(
        "{} products on a {}x{} grid; {filled} cells predicted",
        maps.len(),
        first.ncols,
        first.nrows
    );
    Ok(())
}

fn cmd_xsection(a: &XsectionArgs) -> Result<(), CliError> {
    let loaded = load_checkpoint(&a.checkpoint)?;
    let raster = load_raster(&a.raster)?;
    let settings = loaded.settings(a.samples, a.seed)?;
    let n_min = a.northing_min.unwrap_or(raster.yll);
    let n_max = a.northing_max.unwrap_or(raster.top());
    let step = a.step.unwrap_or(raster.cellsize);
    if !(n_max >= n_min) {
        return Err(CliError::Usage("northing range is empty".into()));
    }
    if !(a.window >= 0.0) {
        return Err(CliError::Usage("overlay window must be non-negative".into()));
    }
    let overlay = match &a.observations {
        Some(p) => Some(load_observations(p, loaded.meta.target_transform)?.0),
        None => None,
    };
    let rows = cross_section(
        &loaded.net,
        &loaded.ckpt.weights,
        &raster,
        &loaded.scaler(),
        &settings,
        a.easting,
        n_min,
        n_max,
        step,
        a.level,
    )?;

    let mut config = to_config(a);
    config["checkpoint_sha256"] = json!(loaded.digest);
    let out = Outputs::create(&a.out_dir, "xsection", config, settings.seed)?;
    let path = out.path("xsection.csv");
    write_xsection_csv(&path, &rows)?;
    out.record(&path)?;
    if let Some(obs) = overlay {
        let near = observations_near_line(&obs, a.easting, a.window);
        let p = out.path("xsection_observations.csv");
        write_observations(&p, &near)?;
        out.record(&p)?;
        println!("{} observations within {} of the line", near.len(), a.window);
    }
    let meta = json!({
        "samples": settings.samples,
        "dropout_rate": loaded.ckpt.header.dropout_rate,
        "seed": settings.seed,
        "easting": a.easting,
        "level": a.level,
        "rows": rows.len(),
        "config_hash": out.config_hash(),
    });
    out.write_text("metadata.json", &(serde_json::to_string_pretty(&meta).expect("metadata serialises") + "\n"))?;
    println!("{} rows along easting {}", rows.len(), a.easting);
    Ok(())
}
