//! Synthetic worlds with a known generating distribution.
//!
//! Terrain is a smooth regional surface plus seeded Gaussian hills. The
//! target mean combines a smooth spatial trend with terms in local relative
//! elevation and mean slope; the noise sd grows with slope.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Observation;
use crate::grid::Raster;
use crate::metrics::{score_ensembles, Evaluation, MetricsError};
use crate::predict::{BoundingBox, PredictiveEnsemble};
use crate::rng::{stream, Purpose};

pub const MIN_SIZE: usize = 96;
/// Interior margin, in cells, kept clear of the raster edge.
pub const MARGIN_CELLS: f64 = 20.0;
/// Radius of the neighbourhood ring, in cells.
const RING_CELLS: f64 = 6.0;
const RING_POINTS: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("world size {0} is below the minimum of {MIN_SIZE} cells")]
    TooSmall(usize),
    #[error("cellsize must be positive")]
    BadCellsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub cellsize: f64,
    /// Zero terrain: the mean reduces to the spatial trend.
    pub flat: bool,
    /// Multiplier on the noise sd; zero gives noise-free targets.
    pub noise_scale: f64,
}

impl SynthConfig {
    pub fn new(size: usize, cellsize: f64) -> Self {
        SynthConfig {
            size,
            cellsize,
            flat: false,
            noise_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Hill {
    x: f64,
    y: f64,
    radius: f64,
    amplitude: f64,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub raster: Raster,
    pub seed: u64,
    pub config: SynthConfig,
    hills: Vec<Hill>,
    relief_scale: f64,
    slope_scale: f64,
}

impl SynthWorld {
    fn extent(&self) -> f64 {
        self.config.size as f64 * self.config.cellsize
    }

    /// Terrain height at any point.
    pub fn terrain(&self, x: f64, y: f64) -> f64 {
        if self.config.flat {
            return 0.0;
        }
        let (u, v) = (x / self.extent(), y / self.extent());
        let mut h = 300.0 + 250.0 * u + 120.0 * (2.2 * std::f64::consts::PI * v + 0.7).sin() * (1.3 * std::f64::consts::PI * u).cos();
        for hill in &self.hills {
            let d2 = (x - hill.x).powi(2) + (y - hill.y).powi(2);
            let r2 = hill.radius * hill.radius;
            if d2 < 25.0 * r2 {
                h += hill.amplitude * (-0.5 * d2 / r2).exp();
            }
        }
        h
    }

    fn ring(&self, x: f64, y: f64) -> impl Iterator<Item = (f64, f64)> {
        let r = RING_CELLS * self.config.cellsize;
        (0..RING_POINTS).map(move |k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / RING_POINTS as f64;
            (x + r * a.cos(), y + r * a.sin())
        })
    }

    fn slope_at(&self, x: f64, y: f64) -> f64 {
        let d = self.config.cellsize;
        let gx = (self.terrain(x + d, y) - self.terrain(x - d, y)) / (2.0 * d);
        let gy = (self.terrain(x, y + d) - self.terrain(x, y - d)) / (2.0 * d);
        gx.hypot(gy)
    }

    /// Height above the mean of the surrounding ring.
    pub fn relief(&self, x: f64, y: f64) -> f64 {
        let ring: f64 = self.ring(x, y).map(|(a, b)| self.terrain(a, b)).sum::<f64>() / RING_POINTS as f64;
        self.terrain(x, y) - ring
    }

    /// Mean slope over the centre and ring points.
    pub fn mean_slope(&self, x: f64, y: f64) -> f64 {
        let ring: f64 = self.ring(x, y).map(|(a, b)| self.slope_at(a, b)).sum();
        (ring + self.slope_at(x, y)) / (RING_POINTS + 1) as f64
    }

    /// Smooth spatial trend.
    pub fn trend(&self, x: f64, y: f64) -> f64 {
        let (u, v) = (x / self.extent(), y / self.extent());
        0.4 * (2.0 * std::f64::consts::PI * u).sin() * (std::f64::consts::PI * v).cos() + 0.3 * v
    }

    fn features(&self, x: f64, y: f64) -> (f64, f64) {
        if self.config.flat {
            return (0.0, 0.0);
        }
        (self.relief(x, y) / self.relief_scale, self.mean_slope(x, y) / self.slope_scale)
    }

    /// True mean of the target.
    pub fn mean(&self, x: f64, y: f64) -> f64 {
        let (z, g) = self.features(x, y);
        self.trend(x, y) + 0.8 * (1.2 * z).tanh() - 0.4 * g.tanh()
    }

    /// True noise sd of the target.
    pub fn sd(&self, x: f64, y: f64) -> f64 {
        let (_, g) = self.features(x, y);
        self.config.noise_scale * (0.2 + 0.25 * (1.0 - (-g * g).exp()))
    }

    /// Lower bound of [`SynthWorld::sd`].
    pub fn sd_min(&self) -> f64 {
        0.2 * self.config.noise_scale
    }

    /// Region at least [`MARGIN_CELLS`] cells from every edge.
    pub fn interior(&self) -> BoundingBox {
        let m = MARGIN_CELLS * self.config.cellsize;
        BoundingBox {
            xmin: m,
            ymin: m,
            xmax: self.extent() - m,
            ymax: self.extent() - m,
        }
    }
}

/// Builds a seeded world with its lower-left corner at the origin.
pub fn make_world(seed: u64, config: SynthConfig) -> Result<SynthWorld, SynthError> {
    if config.size < MIN_SIZE {
        return Err(SynthError::TooSmall(config.size));
    }
    if !(config.cellsize > 0.0 && config.cellsize.is_finite()) {
        return Err(SynthError::BadCellsize);
    }
    let cs = config.cellsize;
    let extent = config.size as f64 * cs;
    let mut hills = Vec::new();
    if !config.flat {
        let mut rng = stream(seed, Purpose::Terrain, 0, 0);
        let count = config.size * config.size / 100;
        let pad = 10.0 * cs;
        for _ in 0..count {
            hills.push(Hill {
                x: rng.gen_range(-pad..extent + pad),
                y: rng.gen_range(-pad..extent + pad),
                radius: rng.gen_range(2.5..7.0) * cs,
                amplitude: rng.gen_range(-40.0..80.0),
            });
        }
    }
    let mut world = SynthWorld {
        raster: Raster::filled_nodata(1, 1, 0.0, 0.0, cs, -9999.0).expect("valid placeholder"),
        seed,
        config,
        hills,
        relief_scale: 1.0,
        slope_scale: 1.0,
    };
    if !config.flat {
        // Normalise the features by their spread over a coarse interior lattice.
        let b = world.interior();
        let step = 4.0 * cs;
        let nx = ((b.xmax - b.xmin) / step) as usize;
        let pts: Vec<(f64, f64)> = (0..nx * nx)
            .map(|i| (b.xmin + (i % nx) as f64 * step, b.ymin + (i / nx) as f64 * step))
            .collect();
        let feats: Vec<(f64, f64)> = pts.par_iter().map(|&(x, y)| (world.relief(x, y), world.mean_slope(x, y))).collect();
        let n = feats.len() as f64;
        let rm = feats.iter().map(|f| f.0).sum::<f64>() / n;
        world.relief_scale = (feats.iter().map(|f| (f.0 - rm).powi(2)).sum::<f64>() / n).sqrt();
        world.slope_scale = feats.iter().map(|f| f.1).sum::<f64>() / n;
    }
    let values: Vec<f64> = (0..config.size * config.size)
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx / config.size, idx % config.size);
            world.terrain((col as f64 + 0.5) * cs, extent - (row as f64 + 0.5) * cs)
        })
        .collect();
    world.raster = Raster::new(config.size, config.size, 0.0, 0.0, cs, -9999.0, values).expect("finite terrain");
    Ok(world)
}

/// Uniform interior locations with targets drawn from `N(m, s^2)`.
pub fn sample_observations(world: &SynthWorld, n: usize, seed: u64) -> Vec<Observation> {
    let b = world.interior();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Purpose::Sampling, i as u64, 0);
            let x = rng.gen_range(b.xmin..b.xmax);
            let y = rng.gen_range(b.ymin..b.ymax);
            let eps: f64 = rng.sample(StandardNormal);
            Observation {
                id: i,
                easting: x,
                northing: y,
                target: world.mean(x, y) + world.sd(x, y) * eps,
            }
        })
        .collect()
}

/// Scores of the true generating distribution at `points`.
pub fn oracle_scores(world: &SynthWorld, points: &[Observation], levels: &[f64]) -> Result<Evaluation, MetricsError> {
    let ensembles: Vec<PredictiveEnsemble> = points
        .par_iter()
        .map(|o| PredictiveEnsemble::gaussian(world.mean(o.easting, o.northing), world.sd(o.easting, o.northing).powi(2)))
        .collect();
    let observed: Vec<f64> = points.iter().map(|o| o.target).collect();
    let locs: Vec<(usize, f64, f64)> = points.iter().map(|o| (o.id, o.easting, o.northing)).collect();
    score_ensembles(&ensembles, &observed, &locs, levels)
}
