//! Loop-based reference network and a finite-difference gradient check.

#![allow(dead_code)]

use geobdl::model::NetworkSpec;
use geobdl::nn::{self, backward, forward, nll_loss, DropoutMask, LayerSpec, Network, Tensor, WeightSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny two-branch network containing every layer kind.
pub fn tiny_spec(variant: usize) -> NetworkSpec {
    let (size, c, stride, dilation, pool) = match variant % 5 {
        0 => (7, 2, 1, 1, 2),
        1 => (9, 3, 2, 1, 2),
        2 => (10, 2, 3, 1, 1),
        3 => (11, 2, 1, 2, 3),
        _ => (8, 3, 1, 1, 2),
    };
    let conv = vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: c,
            kernel: 3,
            stride,
            dilation,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout,
        LayerSpec::Conv2d {
            in_channels: c,
            out_channels: 2,
            kernel: 2,
            stride: 1,
            dilation: 1,
        },
        LayerSpec::Relu,
        LayerSpec::AvgPool2d { pool, stride: 1 },
        LayerSpec::Flatten,
    ];
    let conv_out = nn::branch_output_shape(
        &conv,
        nn::Shape::Map {
            channels: 1,
            height: size,
            width: size,
        },
    )
    .unwrap()
    .numel();
    NetworkSpec {
        patch_channels: 1,
        patch_size: size,
        location_inputs: 3,
        conv_branch: conv,
        dense_branch: vec![LayerSpec::dense(3, 4), LayerSpec::Relu, LayerSpec::Dropout],
        head: vec![
            LayerSpec::Concat,
            LayerSpec::dense(conv_out + 4, 5),
            LayerSpec::Relu,
            LayerSpec::Dropout,
            LayerSpec::dense(5, 2),
        ],
        dropout_rate: 0.3,
    }
}

pub fn random_weights(net: &Network, rng: &mut ChaCha8Rng) -> WeightSet {
    WeightSet {
        tensors: net
            .param_shapes()
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|_| rng.gen_range(-0.6..0.6)).collect()).unwrap()
            })
            .collect(),
    }
}

pub fn random_inputs(spec: &NetworkSpec, batch: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Vec<f64>) {
    let p = spec.patch_size * spec.patch_size;
    let patches = Tensor::new(
        vec![batch, 1, spec.patch_size, spec.patch_size],
        (0..batch * p).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let locs = Tensor::new(vec![batch, 3], (0..batch * 3).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
    let y = (0..batch).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (patches, locs, y)
}

/// Straightforward layer interpreter used as the forward oracle.
pub fn reference_branch(
    layers: &[LayerSpec],
    w: &WeightSet,
    p: &mut usize,
    d: &mut usize,
    mask: Option<&DropoutMask>,
    mut x: Vec<f64>,
    mut hw: (usize, usize, usize),
    margin: &mut f64,
) -> Vec<f64> {
    for layer in layers {
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                dilation,
            } => {
                let (_, h, wd) = hw;
                let span = dilation * (kernel - 1) + 1;
                let (oh, ow) = ((h - span) / stride + 1, (wd - span) / stride + 1);
                let k = &w.tensors[2 * *p].data;
                let b = &w.tensors[2 * *p + 1].data;
                let mut y = vec![0.0; out_channels * oh * ow];
                for o in 0..out_channels {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut s = b[o];
                            for i in 0..in_channels {
                                for u in 0..kernel {
                                    for v in 0..kernel {
                                        let wi = ((o * in_channels + i) * kernel + u) * kernel + v;
                                        let xi = (i * h + r * stride + u * dilation) * wd + c * stride + v * dilation;
                                        s += k[wi] * x[xi];
                                    }
                                }
                            }
                            y[(o * oh + r) * ow + c] = s;
                        }
                    }
                }
                *p += 1;
                x = y;
                hw = (out_channels, oh, ow);
            }
            LayerSpec::Dense { inputs, outputs } => {
                let k = &w.tensors[2 * *p].data;
                let b = &w.tensors[2 * *p + 1].data;
                x = (0..outputs)
                    .map(|o| b[o] + (0..inputs).map(|i| k[o * inputs + i] * x[i]).sum::<f64>())
                    .collect();
                *p += 1;
            }
            LayerSpec::Relu => x.iter_mut().for_each(|v| {
                *margin = margin.min(v.abs());
                *v = v.max(0.0)
            }),
            LayerSpec::Dropout => {
                if let Some(m) = mask {
                    for (v, &keep) in x.iter_mut().zip(&m.layers[*d]) {
                        *v = if keep { *v / m.keep } else { 0.0 };
                    }
                }
                *d += 1;
            }
            LayerSpec::AvgPool2d { pool, stride } => {
                let (ch, h, wd) = hw;
                let (oh, ow) = ((h - pool) / stride + 1, (wd - pool) / stride + 1);
                let mut y = vec![0.0; ch * oh * ow];
                for c in 0..ch {
                    for r in 0..oh {
                        for q in 0..ow {
                            let mut s = 0.0;
                            for u in 0..pool {
                                for v in 0..pool {
                                    s += x[(c * h + r * stride + u) * wd + q * stride + v];
                                }
                            }
                            y[(c * oh + r) * ow + q] = s / (pool * pool) as f64;
                        }
                    }
                }
                x = y;
                hw = (ch, oh, ow);
            }
            LayerSpec::Flatten | LayerSpec::Concat => {}
        }
    }
    x
}

/// Returns `(mu, log_var, smallest |pre-activation| at any ReLU)`.
pub fn reference_forward(
    spec: &NetworkSpec,
    w: &WeightSet,
    mask: Option<&DropoutMask>,
    patch: &[f64],
    loc: &[f64],
) -> (f64, f64, f64) {
    let (mut p, mut d, mut m) = (0, 0, f64::INFINITY);
    let size = spec.patch_size;
    let mut a = reference_branch(&spec.conv_branch, w, &mut p, &mut d, mask, patch.to_vec(), (1, size, size), &mut m);
    let b = reference_branch(&spec.dense_branch, w, &mut p, &mut d, mask, loc.to_vec(), (0, 0, 0), &mut m);
    a.extend(b);
    let out = reference_branch(&spec.head, w, &mut p, &mut d, mask, a, (0, 0, 0), &mut m);
    (out[0], out[1], m)
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter of one random instance of `tiny_spec(variant)`.
pub fn gradient_check(variant: usize, rng: &mut ChaCha8Rng, h: f64) -> f64 {
    let spec = tiny_spec(variant);
    let net = Network::new(&spec).unwrap();
    // resample until no ReLU input sits close enough to its kink for the
    // +-h perturbation to cross it
    let (w, patches, locs, y, masks) = loop {
        let w = random_weights(&net, rng);
        let (patches, locs, y) = random_inputs(&spec, 3, rng);
        let masks: Vec<DropoutMask> = (0..3).map(|_| net.sample_mask(0.3, rng).unwrap()).collect();
        let margin = (0..3)
            .map(|i| reference_forward(&spec, &w, Some(&masks[i]), patches.row(i), locs.row(i)).2)
            .fold(f64::INFINITY, f64::min);
        if margin > 50.0 * h {
            break (w, patches, locs, y, masks);
        }
    };
    let loss = |w: &WeightSet| nll_loss(&forward(&spec, w, Some(&masks), &patches, &locs).unwrap(), &y).unwrap();
    let g = backward(&spec, &w, Some(&masks), &patches, &locs, &y).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..w.tensors.len() {
        for i in 0..w.tensors[t].data.len() {
            let mut wp = w.clone();
            wp.tensors[t].data[i] += h;
            let mut wm = w.clone();
            wm.tensors[t].data[i] -= h;
            let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
            let an = g.tensors[t].data[i];
            let scale = an.abs().max(fd.abs());
            if scale > 1e-7 {
                worst = worst.max((an - fd).abs() / scale);
            } else if (an - fd).abs() >= 1e-9 {
                return f64::INFINITY;
            }
        }
    }
    worst
}

/// Seeded generator for callers that do not depend on `rand_chacha` directly.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
