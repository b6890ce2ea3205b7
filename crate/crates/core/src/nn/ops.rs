//! Per-sample kernels. Convolutions go through an im2col buffer so the hot
//! loops are contiguous dot products and axpys.

/// Geometry of a 2-D convolution on one sample.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvGeom {
    #[inline]
    fn cols(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    #[inline]
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let cols = g.cols();
    let mut col = vec![0.0; g.positions() * cols];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let dst = &mut col[(oy * g.out_w + ox) * cols..][..cols];
            let mut idx = 0;
            for ci in 0..g.in_c {
                let plane = &input[ci * g.in_h * g.in_w..];
                for ky in 0..k {
                    let iy = oy * g.stride + ky * g.dilation;
                    let row = &plane[iy * g.in_w..];
                    for kx in 0..k {
                        dst[idx] = row[ox * g.stride + kx * g.dilation];
                        idx += 1;
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(col: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    let k = g.kernel;
    let cols = g.cols();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let src = &col[(oy * g.out_w + ox) * cols..][..cols];
            let mut idx = 0;
            for ci in 0..g.in_c {
                let base = ci * g.in_h * g.in_w;
                for ky in 0..k {
                    let iy = oy * g.stride + ky * g.dilation;
                    for kx in 0..k {
                        grad_input[base + iy * g.in_w + ox * g.stride + kx * g.dilation] += src[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Output layout `[out_c][out_h][out_w]`; kernel layout `[out_c][in_c][k][k]`.
pub fn conv2d_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let col = im2col(input, g);
    let cols = g.cols();
    let p = g.positions();
    let mut out = vec![0.0; g.out_c * p];
    for co in 0..g.out_c {
        let w = &kernel[co * cols..(co + 1) * cols];
        let o = &mut out[co * p..(co + 1) * p];
        for (pos, v) in o.iter_mut().enumerate() {
            *v = bias[co] + dot(w, &col[pos * cols..(pos + 1) * cols]);
        }
    }
    out
}

/// Accumulates kernel and bias gradients; returns the input gradient when asked.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let col = im2col(input, g);
    let cols = g.cols();
    let p = g.positions();
    let mut grad_col = if want_input_grad { vec![0.0; p * cols] } else { Vec::new() };
    for co in 0..g.out_c {
        let w = &kernel[co * cols..(co + 1) * cols];
        let gk = &mut grad_kernel[co * cols..(co + 1) * cols];
        let go = &grad_out[co * p..(co + 1) * p];
        let mut gb = 0.0;
        for (pos, &d) in go.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb += d;
            axpy(d, &col[pos * cols..(pos + 1) * cols], gk);
            if want_input_grad {
                axpy(d, w, &mut grad_col[pos * cols..(pos + 1) * cols]);
            }
        }
        grad_bias[co] += gb;
    }
    want_input_grad.then(|| {
        let mut gi = vec![0.0; g.in_c * g.in_h * g.in_w];
        col2im_add(&grad_col, g, &mut gi);
        gi
    })
}

/// Kernel layout `[outputs][inputs]`.
pub fn dense_forward(input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + dot(&kernel[o * n..(o + 1) * n], input))
        .collect()
}

pub fn dense_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let n = input.len();
    let mut gi = if want_input_grad { vec![0.0; n] } else { Vec::new() };
    for (o, &d) in grad_out.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grad_bias[o] += d;
        axpy(d, input, &mut grad_kernel[o * n..(o + 1) * n]);
        if want_input_grad {
            axpy(d, &kernel[o * n..(o + 1) * n], &mut gi);
        }
    }
    want_input_grad.then_some(gi)
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pool: usize,
    pub stride: usize,
}

pub fn avgpool_forward(input: &[f64], g: &PoolGeom) -> Vec<f64> {
    let inv = 1.0 / (g.pool * g.pool) as f64;
    let mut out = Vec::with_capacity(g.channels * g.out_h * g.out_w);
    for c in 0..g.channels {
        let plane = &input[c * g.in_h * g.in_w..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut s = 0.0;
                for ky in 0..g.pool {
                    let row = &plane[(oy * g.stride + ky) * g.in_w + ox * g.stride..];
                    s += row[..g.pool].iter().sum::<f64>();
                }
                out.push(s * inv);
            }
        }
    }
    out
}

pub fn avgpool_backward(grad_out: &[f64], g: &PoolGeom) -> Vec<f64> {
    let inv = 1.0 / (g.pool * g.pool) as f64;
    let mut gi = vec![0.0; g.channels * g.in_h * g.in_w];
    for c in 0..g.channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d = grad_out[(c * g.out_h + oy) * g.out_w + ox] * inv;
                for ky in 0..g.pool {
                    let start = c * g.in_h * g.in_w + (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    gi[start..start + g.pool].iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }
    gi
}
