//! Monte Carlo dropout predictive distributions, summaries, maps and
//! cross-sections.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::data::{prepare_input, Observation, StandardScaler};
use crate::grid::Raster;
use crate::nn::{Network, NnError, WeightSet};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("prediction region is empty")]
    EmptyRegion,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// One Gaussian draw `(mu_s, sigma2_s)` from a dropout mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mu: f64,
    pub sigma2: f64,
}

/// Equal-weight Gaussian mixture built from S dropout masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveEnsemble {
    pub draws: Vec<Component>,
    /// One draw of y per mask, present when requested.
    pub y_samples: Option<Vec<f64>>,
}

impl PredictiveEnsemble {
    pub fn new(draws: Vec<Component>) -> Self {
        assert!(!draws.is_empty(), "ensemble needs at least one draw");
        PredictiveEnsemble { draws, y_samples: None }
    }

    /// Single-Gaussian predictive distribution.
    pub fn gaussian(mu: f64, sigma2: f64) -> Self {
        PredictiveEnsemble::new(vec![Component { mu, sigma2 }])
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    fn weight(&self) -> f64 {
        1.0 / self.draws.len() as f64
    }

    // Offsets are taken from the first draw so identical draws give an
    // exact mean and an exactly zero spread.
    fn shift(&self) -> (f64, f64) {
        let origin = self.draws[0].mu;
        (origin, self.draws.iter().map(|c| c.mu - origin).sum::<f64>() * self.weight())
    }

    pub fn mean(&self) -> f64 {
        let (origin, offset) = self.shift();
        origin + offset
    }

    /// Population variance of the component means.
    pub fn var_epistemic(&self) -> f64 {
        let (origin, offset) = self.shift();
        self.draws.iter().map(|c| (c.mu - origin - offset).powi(2)).sum::<f64>() * self.weight()
    }

    /// Mean of the component variances.
    pub fn var_aleatoric(&self) -> f64 {
        self.draws.iter().map(|c| c.sigma2).sum::<f64>() * self.weight()
    }

    /// Mixture variance as the second central moment.
    pub fn var_total(&self) -> f64 {
        let (origin, offset) = self.shift();
        self.draws.iter().map(|c| c.sigma2 + (c.mu - origin - offset).powi(2)).sum::<f64>() * self.weight()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y == f64::INFINITY {
            return 1.0;
        }
        if y == f64::NEG_INFINITY {
            return 0.0;
        }
        self.draws.iter().map(|c| norm_cdf((y - c.mu) / c.sigma2.sqrt())).sum::<f64>() * self.weight()
    }

    /// Log mixture density, via log-sum-exp.
    pub fn log_density(&self, y: f64) -> f64 {
        let terms: Vec<f64> = self
            .draws
            .iter()
            .map(|c| -0.5 * ((2.0 * std::f64::consts::PI * c.sigma2).ln() + (y - c.mu).powi(2) / c.sigma2))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + (terms.iter().map(|t| (t - max).exp()).sum::<f64>() * self.weight()).ln()
    }

    /// Probability that y exceeds `threshold`.
    pub fn exceedance(&self, threshold: f64) -> f64 {
        1.0 - self.cdf(threshold)
    }

    /// Mixture quantile by bisection on the CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        let sd_max = self.draws.iter().map(|c| c.sigma2.sqrt()).fold(0.0, f64::max);
        let mut lo = self.draws.iter().map(|c| c.mu).fold(f64::INFINITY, f64::min) - 12.0 * sd_max;
        let mut hi = self.draws.iter().map(|c| c.mu).fold(f64::NEG_INFINITY, f64::max) + 12.0 * sd_max;
        if p <= 0.0 {
            return lo;
        }
        if p >= 1.0 {
            return hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= 1e-12 * mid.abs().max(1.0) {
                break;
            }
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Central interval holding `level` of the mixture mass.
    pub fn central_interval(&self, level: f64) -> (f64, f64) {
        let tail = (1.0 - level) / 2.0;
        (self.quantile(tail), self.quantile(1.0 - tail))
    }

    /// Central interval of the component means alone.
    pub fn epistemic_interval(&self, level: f64) -> (f64, f64) {
        let mut mus: Vec<f64> = self.draws.iter().map(|c| c.mu).collect();
        mus.sort_by(f64::total_cmp);
        let tail = (1.0 - level) / 2.0;
        (empirical_quantile(&mus, tail), empirical_quantile(&mus, 1.0 - tail))
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Runs `samples` stochastic forward passes. With a zero dropout rate every
/// draw is the deterministic prediction.
pub fn mc_predict<R: Rng + ?Sized>(
    net: &Network,
    w: &WeightSet,
    patch: &[f64],
    location: &[f64],
    samples: usize,
    rng: &mut R,
    with_y_samples: bool,
) -> Result<PredictiveEnsemble, NnError> {
    if samples == 0 {
        return Err(NnError::InvalidSpec("at least one Monte Carlo sample is required".into()));
    }
    let rate = net.spec().dropout_rate;
    let mut draws = Vec::with_capacity(samples);
    let mut ys = Vec::new();
    let mut fixed = None;
    for _ in 0..samples {
        let pred = if rate == 0.0 {
            match fixed {
                Some(p) => p,
                None => *fixed.insert(net.forward_sample(w, None, patch, location)?),
            }
        } else {
            let mask = net.sample_mask(rate, rng)?;
            net.forward_sample(w, Some(&mask), patch, location)?
        };
        if with_y_samples {
            let z: f64 = rng.sample(StandardNormal);
            ys.push(pred.mu + pred.sigma2.sqrt() * z);
        }
        draws.push(Component {
            mu: pred.mu,
            sigma2: pred.sigma2,
        });
    }
    let mut e = PredictiveEnsemble::new(draws);
    if with_y_samples {
        e.y_samples = Some(ys);
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub mean: f64,
    pub var_total: f64,
    pub var_epistemic: f64,
    pub var_aleatoric: f64,
    /// `(level, value)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    /// `(threshold, probability)` pairs.
    pub exceedance: Vec<(f64, f64)>,
}

pub fn summarize(e: &PredictiveEnsemble, levels: &[f64], thresholds: &[f64]) -> PredictiveSummary {
    PredictiveSummary {
        mean: e.mean(),
        var_total: e.var_total(),
        var_epistemic: e.var_epistemic(),
        var_aleatoric: e.var_aleatoric(),
        quantiles: levels.iter().map(|&p| (p, e.quantile(p))).collect(),
        exceedance: thresholds.iter().map(|&t| (t, e.exceedance(t))).collect(),
    }
}

/// A per-cell map product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Product {
    Mean,
    SdTotal,
    SdEpistemic,
    SdAleatoric,
    Quantile(f64),
    Exceedance(f64),
}

impl Product {
    pub fn value(&self, e: &PredictiveEnsemble) -> f64 {
        match *self {
            Product::Mean => e.mean(),
            Product::SdTotal => e.var_total().sqrt(),
            Product::SdEpistemic => e.var_epistemic().sqrt(),
            Product::SdAleatoric => e.var_aleatoric().sqrt(),
            Product::Quantile(p) => e.quantile(p),
            Product::Exceedance(t) => e.exceedance(t),
        }
    }

    /// File-name stem for the product's grid.
    pub fn file_stem(&self) -> String {
        match self {
            Product::Quantile(p) => format!("q_{p}"),
            Product::Exceedance(t) => format!("exceed_{t}"),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for Product {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Product::Mean => write!(f, "mean"),
            Product::SdTotal => write!(f, "sd_total"),
            Product::SdEpistemic => write!(f, "sd_epistemic"),
            Product::SdAleatoric => write!(f, "sd_aleatoric"),
            Product::Quantile(p) => write!(f, "q:{p}"),
            Product::Exceedance(t) => write!(f, "exceed:{t}"),
        }
    }
}

impl FromStr for Product {
    type Err = PredictError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PredictError::Invalid(format!("unknown product {s:?}"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        match s {
            "mean" => Ok(Product::Mean),
            "sd_total" | "sd" => Ok(Product::SdTotal),
            "sd_epistemic" => Ok(Product::SdEpistemic),
            "sd_aleatoric" => Ok(Product::SdAleatoric),
            _ => match s.split_once(':') {
                Some(("q" | "quantile", v)) => {
                    let p = num(v)?;
                    if !(p > 0.0 && p < 1.0) {
                        return Err(PredictError::Invalid(format!("quantile level {p} outside (0, 1)")));
                    }
                    Ok(Product::Quantile(p))
                }
                Some(("exceed" | "exceedance", v)) => Ok(Product::Exceedance(num(v)?)),
                _ => Err(bad()),
            },
        }
    }
}

/// Axis-aligned region in map units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl FromStr for BoundingBox {
    type Err = PredictError;

    /// Parses `xmin,ymin,xmax,ymax`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| PredictError::Invalid(format!("bad bounding box {s:?}")))?;
        match v[..] {
            [xmin, ymin, xmax, ymax] => Ok(BoundingBox { xmin, ymin, xmax, ymax }),
            _ => Err(PredictError::Invalid(format!("bounding box needs four numbers, got {s:?}"))),
        }
    }
}

/// Patch geometry and sampling settings shared by maps and cross-sections.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictSettings {
    pub patch_size: usize,
    pub patch_cellsize: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Predictive distribution at one location, or `None` where the patch cannot
/// be extracted.
pub fn predict_point<R: Rng + ?Sized>(
    net: &Network,
    w: &WeightSet,
    raster: &Raster,
    scaler: &StandardScaler,
    settings: &PredictSettings,
    easting: f64,
    northing: f64,
    rng: &mut R,
) -> Result<Option<PredictiveEnsemble>, NnError> {
    let raw = match raster.extract_patch(easting, northing, settings.patch_size, settings.patch_cellsize) {
        Ok(p) => p,
        Err(_) => return Ok(None),
    };
    let (patch, loc) = match prepare_input(&raw, scaler) {
        Ok(v) => v,
        Err(_) => return Ok(None),
    };
    mc_predict(net, w, &patch.values, &loc.to_array(), settings.samples, rng, false).map(Some)
}

/// Evaluates `products` on a regular grid covering `region`. Cells whose
/// patch cannot be extracted are nodata in every output.
pub fn predict_map(
    net: &Network,
    w: &WeightSet,
    raster: &Raster,
    scaler: &StandardScaler,
    settings: &PredictSettings,
    region: BoundingBox,
    out_cellsize: f64,
    products: &[Product],
) -> Result<Vec<(Product, Raster)>, PredictError> {
    if !(out_cellsize > 0.0) {
        return Err(PredictError::Invalid("output cellsize must be positive".into()));
    }
    if products.is_empty() {
        return Err(PredictError::Invalid("no products requested".into()));
    }
    let ncols = ((region.xmax - region.xmin) / out_cellsize).round();
    let nrows = ((region.ymax - region.ymin) / out_cellsize).round();
    if !(ncols >= 1.0 && nrows >= 1.0) {
        return Err(PredictError::EmptyRegion);
    }
    let (ncols, nrows) = (ncols as usize, nrows as usize);
    let top = region.ymin + nrows as f64 * out_cellsize;
    let cells: Vec<Result<Option<Vec<f64>>, NnError>> = (0..ncols * nrows)
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx / ncols, idx % ncols);
            let x = region.xmin + (col as f64 + 0.5) * out_cellsize;
            let y = top - (row as f64 + 0.5) * out_cellsize;
            let mut rng = stream(settings.seed, Purpose::Predict, idx as u64, 0);
            let e = predict_point(net, w, raster, scaler, settings, x, y, &mut rng)?;
            Ok(e.map(|e| products.iter().map(|p| p.value(&e)).collect()))
        })
        .collect();
    const NODATA: f64 = -9999.0;
    let mut grids: Vec<Vec<f64>> = vec![Vec::with_capacity(ncols * nrows); products.len()];
    let mut filled = 0;
    for cell in cells {
        match cell? {
            Some(vals) => {
                filled += 1;
                for (g, v) in grids.iter_mut().zip(vals) {
                    g.push(v);
                }
            }
            None => grids.iter_mut().for_each(|g| g.push(NODATA)),
        }
    }
    log::info!("predicted {filled} of {} cells", ncols * nrows);
    products
        .iter()
        .zip(grids)
        .map(|(&p, values)| {
            let r = Raster::new(ncols, nrows, region.xmin, region.ymin, out_cellsize, NODATA, values)
                .map_err(|e| PredictError::Invalid(e.to_string()))?;
            Ok((p, r))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XSectionRow {
    pub northing: f64,
    pub mean: f64,
    pub epi_lo: f64,
    pub epi_hi: f64,
    pub tot_lo: f64,
    pub tot_hi: f64,
}

/// Predictions along a north-south line at fixed easting, stepping from
/// `northing_min` to `northing_max`. Rows whose patch cannot be extracted
/// are skipped.
pub fn cross_section(
    net: &Network,
    w: &WeightSet,
    raster: &Raster,
    scaler: &StandardScaler,
    settings: &PredictSettings,
    easting: f64,
    northing_min: f64,
    northing_max: f64,
    step: f64,
    level: f64,
) -> Result<Vec<XSectionRow>, PredictError> {
    if !(step > 0.0) || !(level > 0.0 && level < 1.0) {
        return Err(PredictError::Invalid("step must be positive and level in (0, 1)".into()));
    }
    if !(northing_max >= northing_min) {
        return Err(PredictError::EmptyRegion);
    }
    let n = ((northing_max - northing_min) / step + 1e-9).floor() as usize + 1;
    let rows: Vec<Result<Option<XSectionRow>, NnError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = northing_min + i as f64 * step;
            let mut rng = stream(settings.seed, Purpose::Predict, i as u64, 1);
            let Some(e) = predict_point(net, w, raster, scaler, settings, easting, y, &mut rng)? else {
                return Ok(None);
            };
            let (epi_lo, epi_hi) = e.epistemic_interval(level);
            let (tot_lo, tot_hi) = e.central_interval(level);
            Ok(Some(XSectionRow {
                northing: y,
                mean: e.mean(),
                epi_lo,
                epi_hi,
                tot_lo,
                tot_hi,
            }))
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for r in rows {
        match r? {
            Some(row) => out.push(row),
            None => log::warn!("cross-section row skipped: patch outside the raster"),
        }
    }
    if out.is_empty() {
        return Err(PredictError::EmptyRegion);
    }
    Ok(out)
}

pub fn write_xsection_csv(path: impl AsRef<Path>, rows: &[XSectionRow]) -> Result<(), PredictError> {
    let mut out = String::from("northing,mean,epi_lo,epi_hi,tot_lo,tot_hi\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.northing, r.mean, r.epi_lo, r.epi_hi, r.tot_lo, r.tot_hi
        ));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|source| PredictError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Observations within `window` map units of the line `easting = const`.
pub fn observations_near_line(obs: &[Observation], easting: f64, window: f64) -> Vec<Observation> {
    obs.iter().filter(|o| (o.easting - easting).abs() <= window).copied().collect()
}
