//! Compiled two-branch network: shape inference, forward pass, reverse-mode
//! gradients, dropout masks and weight initialisation.

use rand::Rng;
use rayon::prelude::*;

use super::layer::{LayerSpec, Shape};
use super::ops::{self, ConvGeom, PoolGeom};
use super::tensor::{Tensor, WeightSet};
use super::NnError;
use crate::model::NetworkSpec;
use crate::rng::{stream, Purpose};

/// Lower bound added to the predicted variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Samples per gradient work unit; partial sums are reduced in order so the
/// result does not depend on the number of threads.
const GRAD_CHUNK: usize = 32;

/// Gaussian output of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub log_var: f64,
    pub sigma2: f64,
}

impl GaussianPrediction {
    pub fn new(mu: f64, log_var: f64) -> Result<Self, NnError> {
        let sigma2 = log_var.exp() + VARIANCE_FLOOR;
        if !(mu.is_finite() && sigma2.is_finite()) {
            return Err(NnError::NonFinite("output head".into()));
        }
        Ok(GaussianPrediction { mu, log_var, sigma2 })
    }

    /// Negative log-likelihood of `y`.
    pub fn nll(&self, y: f64) -> f64 {
        let r = y - self.mu;
        0.5 * (LN_2PI + self.sigma2.ln()) + r * r / (2.0 * self.sigma2)
    }

    /// Derivatives of [`Self::nll`] with respect to `mu` and `log_var`.
    pub fn nll_grad(&self, y: f64) -> (f64, f64) {
        let r = y - self.mu;
        let d_mu = -r / self.sigma2;
        let d_sigma2 = 0.5 / self.sigma2 - r * r / (2.0 * self.sigma2 * self.sigma2);
        (d_mu, d_sigma2 * self.log_var.exp())
    }
}

/// Keep decisions for every dropout layer of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    /// Keep probability.
    pub keep: f64,
    pub layers: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn kept_fraction(&self) -> f64 {
        let total: usize = self.layers.iter().map(Vec::len).sum();
        let kept: usize = self.layers.iter().map(|l| l.iter().filter(|&&z| z).count()).sum();
        kept as f64 / total.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conv,
    Dense,
    Head,
}

/// A layer with its resolved shapes and parameter/mask slots.
#[derive(Debug, Clone)]
pub struct Step {
    pub branch: Branch,
    pub layer: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    /// Index of the weight layer (kernel at `2p`, bias at `2p+1`).
    pub param: Option<usize>,
    pub dropout: Option<usize>,
}

/// One training example as seen by [`Network::batch_gradient`].
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub patch: &'a [f64],
    pub location: &'a [f64],
    pub target: f64,
    pub mask: Option<&'a DropoutMask>,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    conv: Vec<Step>,
    dense: Vec<Step>,
    head: Vec<Step>,
    dropout_units: Vec<usize>,
    param_shapes: Vec<Vec<usize>>,
    detach_log_var: bool,
}

impl Network {
    pub fn new(spec: &NetworkSpec) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&spec.dropout_rate) {
            return Err(NnError::InvalidSpec(format!(
                "dropout rate {} outside [0, 1)",
                spec.dropout_rate
            )));
        }
        let mut params = Vec::new();
        let mut drops = Vec::new();
        let patch_shape = Shape::Map {
            channels: spec.patch_channels,
            height: spec.patch_size,
            width: spec.patch_size,
        };
        let conv = compile(&spec.conv_branch, patch_shape, Branch::Conv, &mut params, &mut drops)?;
        let dense = compile(
            &spec.dense_branch,
            Shape::Flat(spec.location_inputs),
            Branch::Dense,
            &mut params,
            &mut drops,
        )?;
        let widths = [&conv, &dense].map(|b| b.last().map(|s| s.output));
        let (a, b) = match widths {
            [Some(Shape::Flat(a)), Some(Shape::Flat(b))] => (a, b),
            _ => return Err(NnError::InvalidSpec("both branches must end flat".into())),
        };
        if spec.head.first() != Some(&LayerSpec::Concat) {
            return Err(NnError::InvalidSpec("head must start with concat".into()));
        }
        let head = compile(&spec.head, Shape::Flat(a + b), Branch::Head, &mut params, &mut drops)?;
        if head.last().map(|s| s.output) != Some(Shape::Flat(2)) {
            return Err(NnError::InvalidSpec("head must output (mu, log_var)".into()));
        }
        Ok(Network {
            spec: spec.clone(),
            conv,
            dense,
            head,
            dropout_units: drops,
            param_shapes: params,
            detach_log_var: false,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Stops gradient flow through the log-variance output.
    pub fn with_detached_log_var(mut self, detach: bool) -> Self {
        self.detach_log_var = detach;
        self
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.conv.iter().chain(&self.dense).chain(&self.head)
    }

    pub fn dropout_units(&self) -> &[usize] {
        &self.dropout_units
    }

    /// Kernel/bias shapes in weight-set order.
    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn patch_len(&self) -> usize {
        self.spec.patch_channels * self.spec.patch_size * self.spec.patch_size
    }

    pub fn check_weights(&self, w: &WeightSet) -> Result<(), NnError> {
        let shapes = w.shapes();
        if shapes != self.param_shapes {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?}", self.param_shapes),
                found: format!("{shapes:?}"),
            });
        }
        Ok(())
    }

    /// Fan-in scaled uniform initialisation with zero biases; the output
    /// layer uses a narrower range than the ReLU layers.
    pub fn init_weights(&self, seed: u64) -> WeightSet {
        let n_layers = self.param_shapes.len() / 2;
        let mut tensors = Vec::with_capacity(self.param_shapes.len());
        for p in 0..n_layers {
            let kshape = self.param_shapes[2 * p].clone();
            let fan_in: usize = kshape[1..].iter().product();
            let gain = if p + 1 == n_layers { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let mut rng = stream(seed, Purpose::Init, p as u64, 0);
            let n: usize = kshape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            tensors.push(Tensor { shape: kshape, data });
            tensors.push(Tensor::zeros(self.param_shapes[2 * p + 1].clone()));
        }
        WeightSet { tensors }
    }

    /// Independent Bernoulli(1 - rate) keep decision per unit of every dropout layer.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Result<DropoutMask, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidSpec(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let layers = self
            .dropout_units
            .iter()
            .map(|&n| {
                if rate == 0.0 {
                    vec![true; n]
                } else {
                    (0..n).map(|_| rng.gen::<f64>() < keep).collect()
                }
            })
            .collect();
        Ok(DropoutMask { keep, layers })
    }

    fn check_inputs(&self, patch: &[f64], loc: &[f64], mask: Option<&DropoutMask>) -> Result<(), NnError> {
        if patch.len() != self.patch_len() || loc.len() != self.spec.location_inputs {
            return Err(NnError::ShapeMismatch {
                expected: format!("patch {} / location {}", self.patch_len(), self.spec.location_inputs),
                found: format!("patch {} / location {}", patch.len(), loc.len()),
            });
        }
        if let Some(m) = mask {
            let ok = m.layers.len() == self.dropout_units.len()
                && m.layers.iter().zip(&self.dropout_units).all(|(l, &n)| l.len() == n);
            if !ok {
                return Err(NnError::ShapeMismatch {
                    expected: format!("mask units {:?}", self.dropout_units),
                    found: format!("{:?}", m.layers.iter().map(Vec::len).collect::<Vec<_>>()),
                });
            }
        }
        Ok(())
    }

    /// Forward pass for one sample. Without a mask dropout layers pass
    /// activations through unchanged.
    pub fn forward_sample(
        &self,
        w: &WeightSet,
        mask: Option<&DropoutMask>,
        patch: &[f64],
        loc: &[f64],
    ) -> Result<GaussianPrediction, NnError> {
        self.check_inputs(patch, loc, mask)?;
        let mut x = run(&self.conv, w, mask, patch.to_vec(), None)?;
        x.extend(run(&self.dense, w, mask, loc.to_vec(), None)?);
        let out = run(&self.head, w, mask, x, None)?;
        GaussianPrediction::new(out[0], out[1])
    }

    /// Adds `weight * d nll / d beta` for one sample into `grads`; returns the NLL.
    pub fn accumulate_gradient(
        &self,
        w: &WeightSet,
        item: &BatchItem<'_>,
        weight: f64,
        grads: &mut WeightSet,
    ) -> Result<f64, NnError> {
        self.check_inputs(item.patch, item.location, item.mask)?;
        let mask = item.mask;
        let (mut tc, mut td, mut th) = (Vec::new(), Vec::new(), Vec::new());
        let a = run(&self.conv, w, mask, item.patch.to_vec(), Some(&mut tc))?;
        let na = a.len();
        let mut x = a;
        x.extend(run(&self.dense, w, mask, item.location.to_vec(), Some(&mut td))?);
        let out = run(&self.head, w, mask, x, Some(&mut th))?;
        let pred = GaussianPrediction::new(out[0], out[1])?;
        let (d_mu, d_lv) = pred.nll_grad(item.target);
        let d_lv = if self.detach_log_var { 0.0 } else { d_lv };
        let g = backprop(&self.head, w, mask, &th, vec![weight * d_mu, weight * d_lv], grads, true)
            .expect("head input gradient requested");
        let (ga, gb) = g.split_at(na);
        backprop(&self.dense, w, mask, &td, gb.to_vec(), grads, false);
        backprop(&self.conv, w, mask, &tc, ga.to_vec(), grads, false);
        Ok(pred.nll(item.target))
    }

    /// Mean-NLL gradient over a batch and the summed NLL.
    pub fn batch_gradient(&self, w: &WeightSet, batch: &[BatchItem<'_>]) -> Result<(WeightSet, f64), NnError> {
        if batch.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let weight = 1.0 / batch.len() as f64;
        let partials: Vec<Result<(WeightSet, f64), NnError>> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = WeightSet::zeros_like(w);
                let mut total = 0.0;
                for item in chunk {
                    total += self.accumulate_gradient(w, item, weight, &mut g)?;
                }
                Ok((g, total))
            })
            .collect();
        let mut iter = partials.into_iter();
        let (mut grads, mut total) = iter.next().expect("non-empty batch")?;
        for part in iter {
            let (g, t) = part?;
            grads.add_assign(&g);
            total += t;
        }
        Ok((grads, total))
    }
}

/// Output shape of a branch applied to `input`.
pub fn branch_output_shape(layers: &[LayerSpec], input: Shape) -> Result<Shape, NnError> {
    let steps = compile(layers, input, Branch::Conv, &mut Vec::new(), &mut Vec::new())?;
    Ok(steps.last().map(|s| s.output).unwrap_or(input))
}

fn compile(
    layers: &[LayerSpec],
    input: Shape,
    branch: Branch,
    params: &mut Vec<Vec<usize>>,
    drops: &mut Vec<usize>,
) -> Result<Vec<Step>, NnError> {
    let invalid = |i: usize, msg: String| NnError::InvalidSpec(format!("{branch:?} layer {i}: {msg}"));
    let mut shape = input;
    let mut steps = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let output = match (*layer, shape) {
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    dilation,
                },
                Shape::Map {
                    channels,
                    height,
                    width,
                },
            ) => {
                if channels != in_channels {
                    return Err(invalid(i, format!("expects {in_channels} channels, got {channels}")));
                }
                if kernel == 0 || stride == 0 || dilation == 0 || out_channels == 0 {
                    return Err(invalid(i, "kernel, stride, dilation and channels must be positive".into()));
                }
                let span = dilation * (kernel - 1) + 1;
                if span > height || span > width {
                    return Err(invalid(i, format!("kernel span {span} exceeds {height}x{width} input")));
                }
                Shape::Map {
                    channels: out_channels,
                    height: (height - span) / stride + 1,
                    width: (width - span) / stride + 1,
                }
            }
            (LayerSpec::Dense { inputs, outputs }, Shape::Flat(n)) => {
                if n != inputs || outputs == 0 {
                    return Err(invalid(i, format!("dense expects {inputs} inputs, got {n}")));
                }
                Shape::Flat(outputs)
            }
            (LayerSpec::Relu | LayerSpec::Dropout, s) => s,
            (
                LayerSpec::AvgPool2d { pool, stride },
                Shape::Map {
                    channels,
                    height,
                    width,
                },
            ) => {
                if pool == 0 || stride == 0 || pool > height || pool > width {
                    return Err(invalid(i, format!("pool {pool} invalid for {height}x{width}")));
                }
                Shape::Map {
                    channels,
                    height: (height - pool) / stride + 1,
                    width: (width - pool) / stride + 1,
                }
            }
            (LayerSpec::Flatten, s) => Shape::Flat(s.numel()),
            (LayerSpec::Concat, s @ Shape::Flat(_)) if branch == Branch::Head && i == 0 => s,
            (l, s) => return Err(invalid(i, format!("{} cannot take input {s}", l.kind()))),
        };
        let param = layer.param_shapes().map(|(k, b)| {
            params.push(k);
            params.push(b);
            params.len() / 2 - 1
        });
        let dropout = matches!(layer, LayerSpec::Dropout).then(|| {
            drops.push(shape.numel());
            drops.len() - 1
        });
        steps.push(Step {
            branch,
            layer: *layer,
            input: shape,
            output,
            param,
            dropout,
        });
        shape = output;
    }
    Ok(steps)
}

fn conv_geom(step: &Step) -> ConvGeom {
    match (step.layer, step.input, step.output) {
        (
            LayerSpec::Conv2d {
                kernel,
                stride,
                dilation,
                ..
            },
            Shape::Map {
                channels: in_c,
                height: in_h,
                width: in_w,
            },
            Shape::Map {
                channels: out_c,
                height: out_h,
                width: out_w,
            },
        ) => ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kernel,
            stride,
            dilation,
        },
        _ => unreachable!("conv step with non-map shapes"),
    }
}

fn pool_geom(step: &Step) -> PoolGeom {
    match (step.layer, step.input, step.output) {
        (
            LayerSpec::AvgPool2d { pool, stride },
            Shape::Map {
                channels,
                height: in_h,
                width: in_w,
            },
            Shape::Map {
                height: out_h,
                width: out_w,
                ..
            },
        ) => PoolGeom {
            channels,
            in_h,
            in_w,
            out_h,
            out_w,
            pool,
            stride,
        },
        _ => unreachable!("pool step with non-map shapes"),
    }
}

fn check_finite(step: &Step, y: &[f64]) -> Result<(), NnError> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite(format!("{:?} {}", step.branch, step.layer.kind())))
    }
}

/// Runs a branch; with a tape, records each step's input.
fn run(
    steps: &[Step],
    w: &WeightSet,
    mask: Option<&DropoutMask>,
    input: Vec<f64>,
    mut tape: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<f64>, NnError> {
    let mut x = input;
    for step in steps {
        let y = match step.layer {
            LayerSpec::Conv2d { .. } => {
                let (k, b) = w.layer(step.param.expect("weight layer"));
                let y = ops::conv2d_forward(&x, k, b, &conv_geom(step));
                check_finite(step, &y)?;
                y
            }
            LayerSpec::Dense { .. } => {
                let (k, b) = w.layer(step.param.expect("weight layer"));
                let y = ops::dense_forward(&x, k, b);
                check_finite(step, &y)?;
                y
            }
            LayerSpec::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            LayerSpec::Dropout => match mask {
                None => x.clone(),
                Some(m) => {
                    let z = &m.layers[step.dropout.expect("dropout slot")];
                    let s = 1.0 / m.keep;
                    x.iter().zip(z).map(|(&v, &k)| if k { v * s } else { 0.0 }).collect()
                }
            },
            LayerSpec::AvgPool2d { .. } => ops::avgpool_forward(&x, &pool_geom(step)),
            LayerSpec::Flatten | LayerSpec::Concat => x.clone(),
        };
        if let Some(t) = tape.as_deref_mut() {
            t.push(x);
        }
        x = y;
    }
    Ok(x)
}

/// Reverse pass over a branch. Returns the gradient with respect to the
/// branch input when `want_input_grad` is set.
fn backprop(
    steps: &[Step],
    w: &WeightSet,
    mask: Option<&DropoutMask>,
    tape: &[Vec<f64>],
    grad_out: Vec<f64>,
    grads: &mut WeightSet,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let mut g = grad_out;
    for (idx, step) in steps.iter().enumerate().rev() {
        let input = &tape[idx];
        let need = idx > 0 || want_input_grad;
        g = match step.layer {
            LayerSpec::Conv2d { .. } => {
                let p = step.param.expect("weight layer");
                let kernel = &w.tensors[2 * p].data;
                let (gk, gb) = grads.layer_mut(p);
                match ops::conv2d_backward(input, kernel, &g, &conv_geom(step), gk, gb, need) {
                    Some(gi) => gi,
                    None => return None,
                }
            }
            LayerSpec::Dense { .. } => {
                let p = step.param.expect("weight layer");
                let kernel = &w.tensors[2 * p].data;
                let (gk, gb) = grads.layer_mut(p);
                match ops::dense_backward(input, kernel, &g, gk, gb, need) {
                    Some(gi) => gi,
                    None => return None,
                }
            }
            LayerSpec::Relu => g
                .iter()
                .zip(input)
                .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                .collect(),
            LayerSpec::Dropout => match mask {
                None => g,
                Some(m) => {
                    let z = &m.layers[step.dropout.expect("dropout slot")];
                    let s = 1.0 / m.keep;
                    g.iter().zip(z).map(|(&d, &k)| if k { d * s } else { 0.0 }).collect()
                }
            },
            LayerSpec::AvgPool2d { .. } => ops::avgpool_backward(&g, &pool_geom(step)),
            LayerSpec::Flatten | LayerSpec::Concat => g,
        };
    }
    want_input_grad.then_some(g)
}
