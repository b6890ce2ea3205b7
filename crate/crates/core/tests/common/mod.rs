//! Shared fixtures: a linear target over the location inputs with
//! uninformative random patches, and a tiny network that fits it.

#![allow(dead_code)]

use geobdl::data::{DatasetSplit, LocationVector, PatchSample};
use geobdl::grid::Patch;
use geobdl::model::NetworkSpec;
use geobdl::nn::LayerSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const NOISE_SD: f64 = 0.3;

pub fn linear_target(loc: [f64; 3]) -> f64 {
    0.8 * loc[0] - 0.5 * loc[1] + 0.3 * loc[2] + 0.2
}

pub fn sample(id: usize, rng: &mut ChaCha8Rng, noise: f64) -> PatchSample {
    let loc = [rng.gen_range(-1.7..1.7), rng.gen_range(-1.7..1.7), rng.gen_range(-1.7..1.7)];
    let eps: f64 = rng.sample(StandardNormal);
    PatchSample {
        id,
        patch: Patch {
            size: 4,
            cellsize: 1.0,
            values: (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            centre_easting: 0.0,
            centre_northing: 0.0,
            centre_elevation: 0.0,
            centre_value: 0.0,
        },
        location: LocationVector {
            easting_std: loc[0],
            northing_std: loc[1],
            elevation_std: loc[2],
        },
        target: linear_target(loc) + noise * eps,
        fold: 0,
    }
}

pub fn linear_split(n_train: usize, n_eval: usize, seed: u64, noise: f64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DatasetSplit {
        train: (0..n_train).map(|i| sample(i, &mut rng, noise)).collect(),
        eval: (0..n_eval).map(|i| sample(n_train + i, &mut rng, noise)).collect(),
        test: Vec::new(),
    }
}

pub fn tiny_spec(width: usize) -> NetworkSpec {
    NetworkSpec {
        patch_channels: 1,
        patch_size: 4,
        location_inputs: 3,
        conv_branch: vec![
            LayerSpec::conv3x3(1, 2, 1),
            LayerSpec::Relu,
            LayerSpec::Dropout,
            LayerSpec::Flatten,
        ],
        dense_branch: vec![LayerSpec::dense(3, width), LayerSpec::Relu, LayerSpec::Dropout],
        head: vec![
            LayerSpec::Concat,
            LayerSpec::dense(8 + width, width),
            LayerSpec::Relu,
            LayerSpec::Dropout,
            LayerSpec::dense(width, 2),
        ],
        dropout_rate: 0.0,
    }
}
