//! Minimal differentiable-layer substrate for the two-branch network.

mod checkpoint;
mod layer;
pub mod ops;
mod network;
mod tensor;

use rand::Rng;
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointHeader, Dtype};
pub use layer::{LayerSpec, Shape};
pub use network::{
    branch_output_shape, BatchItem, Branch, DropoutMask, GaussianPrediction, Network, Step, VARIANCE_FLOOR,
};
pub use tensor::{Tensor, WeightSet};

use crate::model::NetworkSpec;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Splits batched inputs (`[batch, channels, size, size]` patches and
/// `[batch, location_inputs]` locations) into per-sample slices.
fn batch_rows<'a>(
    patches: &'a Tensor,
    locations: &'a Tensor,
) -> Result<Vec<(&'a [f64], &'a [f64])>, NnError> {
    let n = patches.shape.first().copied().unwrap_or(0);
    if locations.shape.first().copied() != Some(n) {
        return Err(NnError::ShapeMismatch {
            expected: format!("{n} locations"),
            found: format!("{:?}", locations.shape),
        });
    }
    Ok((0..n).map(|i| (patches.row(i), locations.row(i))).collect())
}

/// Forward pass over a batch. `masks`, when given, holds one mask per sample.
pub fn forward(
    spec: &NetworkSpec,
    w: &WeightSet,
    masks: Option<&[DropoutMask]>,
    patches: &Tensor,
    locations: &Tensor,
) -> Result<Vec<GaussianPrediction>, NnError> {
    let net = Network::new(spec)?;
    net.check_weights(w)?;
    let rows = batch_rows(patches, locations)?;
    if let Some(m) = masks {
        if m.len() != rows.len() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} masks", rows.len()),
                found: format!("{}", m.len()),
            });
        }
    }
    rows.iter()
        .enumerate()
        .map(|(i, (p, l))| net.forward_sample(w, masks.map(|m| &m[i]), p, l))
        .collect()
}

/// Mean Gaussian negative log-likelihood.
pub fn nll_loss(preds: &[GaussianPrediction], targets: &[f64]) -> Result<f64, NnError> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(NnError::EmptyBatch);
    }
    Ok(preds.iter().zip(targets).map(|(p, &y)| p.nll(y)).sum::<f64>() / preds.len() as f64)
}

/// Gradient of [`nll_loss`] with respect to every parameter.
pub fn backward(
    spec: &NetworkSpec,
    w: &WeightSet,
    masks: Option<&[DropoutMask]>,
    patches: &Tensor,
    locations: &Tensor,
    targets: &[f64],
) -> Result<WeightSet, NnError> {
    let net = Network::new(spec)?;
    net.check_weights(w)?;
    let rows = batch_rows(patches, locations)?;
    if rows.len() != targets.len() || masks.is_some_and(|m| m.len() != rows.len()) {
        return Err(NnError::ShapeMismatch {
            expected: format!("{} targets and masks", rows.len()),
            found: format!("{} targets", targets.len()),
        });
    }
    let items: Vec<BatchItem<'_>> = rows
        .iter()
        .enumerate()
        .map(|(i, &(patch, location))| BatchItem {
            patch,
            location,
            target: targets[i],
            mask: masks.map(|m| &m[i]),
        })
        .collect();
    Ok(net.batch_gradient(w, &items)?.0)
}

pub fn sample_mask<R: Rng + ?Sized>(spec: &NetworkSpec, rate: f64, rng: &mut R) -> Result<DropoutMask, NnError> {
    Network::new(spec)?.sample_mask(rate, rng)
}

/// Trainable parameter count: weights plus biases of every layer.
pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.layers().map(LayerSpec::param_count).sum()
}
