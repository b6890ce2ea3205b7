//! Proper scoring rules and held-out evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PatchSample;
use crate::nn::{Network, NnError, WeightSet};
use crate::predict::{mc_predict, norm_cdf, norm_pdf, PredictiveEnsemble};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no observations to score")]
    Empty,
    #[error("length mismatch: {0} predictions for {1} observations")]
    Length(usize, usize),
    #[error("observed values have zero variance")]
    ConstantObserved,
    #[error("ensemble CRPS needs at least two samples")]
    TooFewSamples,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(predicted: &[f64], observed: &[f64]) -> Result<f64, MetricsError> {
    if observed.is_empty() {
        return Err(MetricsError::Empty);
    }
    if predicted.len() != observed.len() {
        return Err(MetricsError::Length(predicted.len(), observed.len()));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::ConstantObserved);
    }
    let ss_res: f64 = predicted.iter().zip(observed).map(|(p, y)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Negative log predictive density of `y` under the mixture.
pub fn log_score(e: &PredictiveEnsemble, y: f64) -> f64 {
    -e.log_density(y)
}

/// Closed-form CRPS of a Gaussian forecast.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> f64 {
    if sigma == 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

/// Unbiased (fair) CRPS estimate from predictive samples.
pub fn crps_ensemble(samples: &[f64], y: f64) -> Result<f64, MetricsError> {
    let s = samples.len();
    if s < 2 {
        return Err(MetricsError::TooFewSamples);
    }
    let first = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / s as f64;
    // sum_{i,j} |x_i - x_j| from the sorted order statistics
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - (s - 1) as f64))
        .sum::<f64>()
        * 2.0;
    Ok(first - pair_sum / (2.0 * (s * (s - 1)) as f64))
}

/// `E|X|` for `X ~ N(m, v)`.
fn abs_moment(m: f64, v: f64) -> f64 {
    if v == 0.0 {
        return m.abs();
    }
    let s = v.sqrt();
    2.0 * s * norm_pdf(m / s) + m * (2.0 * norm_cdf(m / s) - 1.0)
}

/// Closed-form CRPS of an equal-weight Gaussian mixture.
pub fn crps_mixture(e: &PredictiveEnsemble, y: f64) -> f64 {
    let w = 1.0 / e.len() as f64;
    let first: f64 = e.draws.iter().map(|c| abs_moment(c.mu - y, c.sigma2)).sum::<f64>() * w;
    let mut second = 0.0;
    for (i, a) in e.draws.iter().enumerate() {
        second += abs_moment(0.0, 2.0 * a.sigma2);
        for b in &e.draws[i + 1..] {
            second += 2.0 * abs_moment(a.mu - b.mu, a.sigma2 + b.sigma2);
        }
    }
    first - 0.5 * second * w * w
}

/// Key used for a nominal level in coverage maps.
pub fn level_key(level: f64) -> String {
    format!("{level}")
}

/// Fraction of observations inside each central predictive interval.
pub fn interval_coverage(
    ensembles: &[PredictiveEnsemble],
    observed: &[f64],
    levels: &[f64],
) -> Result<BTreeMap<String, f64>, MetricsError> {
    if observed.is_empty() {
        return Err(MetricsError::Empty);
    }
    if ensembles.len() != observed.len() {
        return Err(MetricsError::Length(ensembles.len(), observed.len()));
    }
    let mut out = BTreeMap::new();
    for &level in levels {
        let hits = ensembles
            .par_iter()
            .zip(observed)
            .filter(|(e, &y)| {
                let (lo, hi) = e.central_interval(level);
                lo <= y && y <= hi
            })
            .count();
        out.insert(level_key(level), hits as f64 / observed.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub samples: usize,
    pub r2: f64,
    pub mean_nll: f64,
    pub mean_crps: f64,
    pub coverage: BTreeMap<String, f64>,
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        write_text(path.as_ref(), &(self.to_json() + "\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationScore {
    pub id: usize,
    pub easting: f64,
    pub northing: f64,
    pub observed: f64,
    pub mean: f64,
    pub sd_total: f64,
    pub sd_epistemic: f64,
    pub sd_aleatoric: f64,
    pub nll: f64,
    pub crps: f64,
}

/// Scores and summaries for a set of predictive distributions.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ScoreReport,
    pub rows: Vec<ObservationScore>,
    /// Pooled predictive draws of y, when collected.
    pub y_samples: Vec<f64>,
}

/// Scores predictive distributions against observations located at `points`.
pub fn score_ensembles(
    ensembles: &[PredictiveEnsemble],
    observed: &[f64],
    points: &[(usize, f64, f64)],
    levels: &[f64],
) -> Result<Evaluation, MetricsError> {
    if ensembles.len() != observed.len() || points.len() != observed.len() {
        return Err(MetricsError::Length(ensembles.len(), observed.len()));
    }
    let rows: Vec<ObservationScore> = ensembles
        .par_iter()
        .zip(observed)
        .zip(points)
        .map(|((e, &y), &(id, easting, northing))| ObservationScore {
            id,
            easting,
            northing,
            observed: y,
            mean: e.mean(),
            sd_total: e.var_total().sqrt(),
            sd_epistemic: e.var_epistemic().sqrt(),
            sd_aleatoric: e.var_aleatoric().sqrt(),
            nll: log_score(e, y),
            crps: crps_mixture(e, y),
        })
        .collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let n = rows.len();
    let report = ScoreReport {
        n,
        samples: ensembles.first().map_or(0, PredictiveEnsemble::len),
        r2: r_squared(&means, observed)?,
        mean_nll: rows.iter().map(|r| r.nll).sum::<f64>() / n as f64,
        mean_crps: rows.iter().map(|r| r.crps).sum::<f64>() / n as f64,
        coverage: interval_coverage(ensembles, observed, levels)?,
    };
    let y_samples = ensembles.iter().filter_map(|e| e.y_samples.as_deref()).flatten().copied().collect();
    Ok(Evaluation { report, rows, y_samples })
}

/// Monte Carlo predictions for every sample, one seeded stream per sample.
pub fn predict_samples(
    net: &Network,
    w: &WeightSet,
    samples: &[PatchSample],
    draws: usize,
    seed: u64,
) -> Result<Vec<PredictiveEnsemble>, MetricsError> {
    samples
        .par_iter()
        .map(|s| {
            let mut rng = stream(seed, Purpose::Predict, s.id as u64, 2);
            mc_predict(net, w, &s.patch.values, &s.location_array(), draws, &mut rng, true)
                .map_err(MetricsError::from)
        })
        .collect()
}

/// Predicts and scores a held-out split.
pub fn evaluate(
    net: &Network,
    w: &WeightSet,
    samples: &[PatchSample],
    draws: usize,
    seed: u64,
    levels: &[f64],
) -> Result<Evaluation, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let ensembles = predict_samples(net, w, samples, draws, seed)?;
    let observed: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let points: Vec<(usize, f64, f64)> = samples
        .iter()
        .map(|s| (s.id, s.patch.centre_easting, s.patch.centre_northing))
        .collect();
    score_ensembles(&ensembles, &observed, &points, levels)
}

fn write_text(path: &Path, text: &str) -> Result<(), MetricsError> {
    fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_scores_csv(path: impl AsRef<Path>, rows: &[ObservationScore]) -> Result<(), MetricsError> {
    let mut out = String::from("id,easting,northing,observed,mean,sd_total,sd_epistemic,sd_aleatoric,nll,crps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.id, r.easting, r.northing, r.observed, r.mean, r.sd_total, r.sd_epistemic, r.sd_aleatoric, r.nll, r.crps
        ));
    }
    write_text(path.as_ref(), &out)
}

/// Observed against predicted mean, one row per observation.
pub fn write_scatter_csv(path: impl AsRef<Path>, rows: &[ObservationScore]) -> Result<(), MetricsError> {
    let mut out = String::from("observed,predicted\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.observed, r.mean));
    }
    write_text(path.as_ref(), &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    /// Density of the observed values.
    pub observed: f64,
    /// Density of the pooled predictive draws.
    pub predicted: f64,
}

/// Density histograms of observed values and predictive draws on shared bins.
pub fn histogram(observed: &[f64], predicted: &[f64], bins: usize) -> Vec<HistogramBin> {
    let all = observed.iter().chain(predicted);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if bins == 0 || !lo.is_finite() || !hi.is_finite() {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let density = |values: &[f64]| {
        let mut counts = vec![0.0; bins];
        for v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1.0;
        }
        let scale = if values.is_empty() { 0.0 } else { 1.0 / (values.len() as f64 * width) };
        counts.into_iter().map(move |c| c * scale)
    };
    density(observed)
        .zip(density(predicted))
        .enumerate()
        .map(|(i, (o, p))| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            observed: o,
            predicted: p,
        })
        .collect()
}

pub fn write_histogram_csv(path: impl AsRef<Path>, bins: &[HistogramBin]) -> Result<(), MetricsError> {
    let mut out = String::from("bin_lo,bin_hi,observed_density,predicted_density\n");
    for b in bins {
        out.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, b.observed, b.predicted));
    }
    write_text(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_cases() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert!((r_squared(&[2.0; 3], &y).unwrap()).abs() < 1e-15);
        assert!(r_squared(&[1.0], &[5.0]).is_err());
        assert!(r_squared(&[], &[]).is_err());
    }

    #[test]
    fn crps_gaussian_at_mean() {
        let v = crps_gaussian(0.0, 1.0, 0.0);
        let expected = (2.0f64.sqrt() - 1.0) / std::f64::consts::PI.sqrt();
        assert!((v - expected).abs() < 1e-12);
        assert_eq!(crps_gaussian(1.0, 0.0, 3.0), 2.0);
    }

    #[test]
    fn mixture_crps_of_one_component() {
        for (mu, s2, y) in [(0.0, 1.0, 0.3), (2.0, 0.25, -1.0), (-1.0, 4.0, 5.0)] {
            let a = crps_mixture(&PredictiveEnsemble::gaussian(mu, s2), y);
            assert!((a - crps_gaussian(mu, s2.sqrt(), y)).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_crps_pairs() {
        // brute force: mean |x - y| - sum_{i != j} |x_i - x_j| / (2 S (S-1))
        let xs: [f64; 4] = [0.3, -1.2, 2.0, 0.7];
        let y: f64 = 0.5;
        let s = xs.len() as f64;
        let a: f64 = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / s;
        let mut b = 0.0;
        for x in xs {
            for z in xs {
                b += (x - z).abs();
            }
        }
        let expected = a - b / (2.0 * s * (s - 1.0));
        assert!((crps_ensemble(&xs, y).unwrap() - expected).abs() < 1e-14);
        assert!(crps_ensemble(&[1.0], 0.0).is_err());
    }

    #[test]
    fn log_score_standard_normal() {
        let e = PredictiveEnsemble::gaussian(0.0, 1.0);
        let expected = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((log_score(&e, 0.0) - expected).abs() < 1e-14);
    }

    #[test]
    fn histogram_densities_integrate() {
        let bins = histogram(&[0.0, 1.0, 2.0, 3.0], &[0.5, 1.5, 2.5], 3);
        assert_eq!(bins.len(), 3);
        let area: f64 = bins.iter().map(|b| b.observed * (b.hi - b.lo)).sum();
        assert!((area - 1.0).abs() < 1e-12);
    }
}
