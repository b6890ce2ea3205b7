//! Observation ingestion and dataset assembly.
//!
//! Each observation is joined with a normalised terrain patch and a
//! standardised `(easting, northing, elevation)` triple. Folds are assigned
//! at random; the scaler only ever sees the training folds.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{normalize_patch, GridError, Patch, Raster};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("invalid fold count {k} for {n} observations (need 3 <= k <= n)")]
    BadFolds { k: usize, n: usize },
    #[error("no samples retained after patch extraction")]
    NoSamples,
    #[error("cannot standardise {variable}: standard deviation is {sd}")]
    DegenerateScaler { variable: &'static str, sd: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A point-sampled target value, already in model space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Zero-based data-row index in the source file.
    pub id: usize,
    pub easting: f64,
    pub northing: f64,
    pub target: f64,
}

/// Result of reading an observations file.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub observations: Vec<Observation>,
    /// Rows skipped because a field was missing, `NA` or non-finite.
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetTransform {
    #[default]
    None,
    Log,
}

impl TargetTransform {
    pub fn apply(self, v: f64) -> Option<f64> {
        match self {
            TargetTransform::None => Some(v),
            TargetTransform::Log if v > 0.0 => Some(v.ln()),
            TargetTransform::Log => None,
        }
    }
}

impl std::str::FromStr for TargetTransform {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "identity" => Ok(TargetTransform::None),
            "log" => Ok(TargetTransform::Log),
            other => Err(format!("unknown target transform {other:?}")),
        }
    }
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan")
}

/// Reads a CSV with header `easting,northing,value`.
pub fn read_observations(path: impl AsRef<Path>) -> Result<ObservationSet, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_observations(&text)
}

pub fn parse_observations(text: &str) -> Result<ObservationSet, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    if names != ["easting", "northing", "value"] {
        return Err(DataError::Parse {
            line: 1,
            msg: format!("expected header easting,northing,value, found {}", names.join(",")),
        });
    }
    let mut observations = Vec::new();
    let mut dropped = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
        let mut vals = [0.0f64; 3];
        let mut missing = false;
        for (k, field) in record.iter().enumerate() {
            if is_missing(field) {
                missing = true;
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("unparseable field {field:?}"),
            })?;
            if !v.is_finite() {
                missing = true;
            }
            vals[k] = v;
        }
        if missing {
            dropped += 1;
            continue;
        }
        observations.push(Observation {
            id: row,
            easting: vals[0],
            northing: vals[1],
            target: vals[2],
        });
    }
    if dropped > 0 {
        log::info!("excluded {dropped} rows with missing or non-finite values");
    }
    Ok(ObservationSet { observations, dropped })
}

pub fn write_observations(path: impl AsRef<Path>, obs: &[Observation]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["easting", "northing", "value"])?;
    for o in obs {
        w.write_record([
            format!("{}", o.easting),
            format!("{}", o.northing),
            format!("{}", o.target),
        ])?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Random partition of `n` items into `k` folds whose sizes differ by at most one.
///
/// Positions of a seeded permutation are cut into contiguous runs; the first
/// `n % k` folds receive the extra item.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if k < 3 || k > n {
        return Err(DataError::BadFolds { k, n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, Purpose::Folds, 0, 0));
    let base = n / k;
    let extra = n % k;
    let mut labels = vec![0; n];
    let mut pos = 0;
    for fold in 0..k {
        let len = base + usize::from(fold < extra);
        for &i in &perm[pos..pos + len] {
            labels[i] = fold;
        }
        pos += len;
    }
    Ok(labels)
}

/// Mean and standard deviation of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    /// Population mean and standard deviation.
    pub fn fit(values: impl Iterator<Item = f64> + Clone, variable: &'static str) -> Result<Self, DataError> {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let sd = (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(DataError::DegenerateScaler { variable, sd });
        }
        Ok(Standardizer { mean, sd })
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// Standardisation for the location branch plus the patch scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub easting: Standardizer,
    pub northing: Standardizer,
    pub elevation: Standardizer,
    /// Standard deviation of the whole auxiliary raster, used for patches.
    pub grid_sd: f64,
}

impl StandardScaler {
    /// Fits on `(easting, northing, elevation)` triples.
    pub fn fit(points: &[(f64, f64, f64)], grid_sd: f64) -> Result<Self, DataError> {
        if points.is_empty() {
            return Err(DataError::NoSamples);
        }
        if !(grid_sd > 0.0 && grid_sd.is_finite()) {
            return Err(DataError::DegenerateScaler {
                variable: "grid",
                sd: grid_sd,
            });
        }
        Ok(StandardScaler {
            easting: Standardizer::fit(points.iter().map(|p| p.0), "easting")?,
            northing: Standardizer::fit(points.iter().map(|p| p.1), "northing")?,
            elevation: Standardizer::fit(points.iter().map(|p| p.2), "elevation")?,
            grid_sd,
        })
    }

    pub fn transform(&self, easting: f64, northing: f64, elevation: f64) -> LocationVector {
        LocationVector {
            easting_std: self.easting.apply(easting),
            northing_std: self.northing.apply(northing),
            elevation_std: self.elevation.apply(elevation),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationVector {
    pub easting_std: f64,
    pub northing_std: f64,
    pub elevation_std: f64,
}

impl LocationVector {
    pub fn to_array(self) -> [f64; 3] {
        [self.easting_std, self.northing_std, self.elevation_std]
    }
}

/// Observation joined with its model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub id: usize,
    /// Normalised patch.
    pub patch: Patch,
    pub location: LocationVector,
    pub target: f64,
    pub fold: usize,
}

impl PatchSample {
    pub fn location_array(&self) -> [f64; 3] {
        self.location.to_array()
    }
}

/// Prepares a raw patch and location for the network.
pub fn prepare_input(raw: &Patch, scaler: &StandardScaler) -> Result<(Patch, LocationVector), GridError> {
    let patch = normalize_patch(raw, scaler.grid_sd)?;
    let loc = scaler.transform(raw.centre_easting, raw.centre_northing, raw.centre_elevation);
    Ok((patch, loc))
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<PatchSample>,
    pub eval: Vec<PatchSample>,
    pub test: Vec<PatchSample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.eval.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, which: SplitName) -> &[PatchSample] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Eval => &self.eval,
            SplitName::Test => &self.test,
        }
    }

    /// Replaces every patch with zeros, leaving only the location inputs
    /// informative.
    pub fn zero_patches(&mut self) {
        for s in self.train.iter_mut().chain(&mut self.eval).chain(&mut self.test) {
            s.patch.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Eval,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "eval" => Ok(SplitName::Eval),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Eval => "eval",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub patch_size: usize,
    pub patch_cellsize: f64,
    pub folds: usize,
    pub seed: u64,
}

impl DatasetConfig {
    /// The last fold is the test set and the one before it the evaluation set.
    pub fn test_fold(&self) -> usize {
        self.folds - 1
    }

    pub fn eval_fold(&self) -> usize {
        self.folds - 2
    }

    pub fn split_of(&self, fold: usize) -> SplitName {
        if fold == self.test_fold() {
            SplitName::Test
        } else if fold == self.eval_fold() {
            SplitName::Eval
        } else {
            SplitName::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub fold: Option<usize>,
    pub dropped_reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: DatasetSplit,
    pub scaler: StandardScaler,
    pub manifest: Vec<ManifestRow>,
    pub config: DatasetConfig,
}

/// Extracts patches, assigns folds, fits the scaler on the training folds
/// and transforms every split with it.
pub fn build_dataset(obs: &[Observation], raster: &Raster, cfg: &DatasetConfig) -> Result<Dataset, DataError> {
    let grid_sd = raster.std_dev().unwrap_or(0.0);
    let extracted: Vec<Result<Patch, GridError>> = obs
        .par_iter()
        .map(|o| raster.extract_patch(o.easting, o.northing, cfg.patch_size, cfg.patch_cellsize))
        .collect();

    let mut manifest = Vec::with_capacity(obs.len());
    let mut retained: Vec<(Observation, Patch)> = Vec::with_capacity(obs.len());
    for (o, r) in obs.iter().zip(extracted) {
        match r {
            Ok(p) => retained.push((*o, p)),
            Err(e) => {
                log::debug!("dropping observation {}: {e}", o.id);
                manifest.push(ManifestRow {
                    id: o.id,
                    fold: None,
                    dropped_reason: Some(e.reason().to_string()),
                });
            }
        }
    }
    if !manifest.is_empty() {
        log::warn!("dropped {} observations whose patches could not be extracted", manifest.len());
    }
    if retained.is_empty() {
        return Err(DataError::NoSamples);
    }

    let folds = assign_folds(retained.len(), cfg.folds, cfg.seed)?;
    let train_points: Vec<(f64, f64, f64)> = retained
        .iter()
        .zip(&folds)
        .filter(|(_, &f)| cfg.split_of(f) == SplitName::Train)
        .map(|((o, p), _)| (o.easting, o.northing, p.centre_elevation))
        .collect();
    let scaler = StandardScaler::fit(&train_points, grid_sd)?;

    let mut split = DatasetSplit::default();
    for ((o, raw), fold) in retained.into_iter().zip(folds) {
        let (patch, location) = prepare_input(&raw, &scaler)?;
        manifest.push(ManifestRow {
            id: o.id,
            fold: Some(fold),
            dropped_reason: None,
        });
        let sample = PatchSample {
            id: o.id,
            patch,
            location,
            target: o.target,
            fold,
        };
        match cfg.split_of(fold) {
            SplitName::Train => split.train.push(sample),
            SplitName::Eval => split.eval.push(sample),
            SplitName::Test => split.test.push(sample),
        }
    }
    manifest.sort_by_key(|r| r.id);
    Ok(Dataset {
        split,
        scaler,
        manifest,
        config: *cfg,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "fold", "dropped_reason"])?;
    for r in rows {
        w.write_record([
            r.id.to_string(),
            r.fold.map(|f| f.to_string()).unwrap_or_default(),
            r.dropped_reason.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
