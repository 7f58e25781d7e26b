//! Network building blocks with hand-written backward passes.
//!
//! Convolutions run as shift-and-accumulate over contiguous x-rows, which
//! keeps the inner loops vectorizable; parallelism is over disjoint output
//! channels, so results do not depend on thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::exec;

const NORM_EPS: f64 = 1e-5;
const PRELU_INIT: f64 = 0.15;

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// out(p) += w * src(p + off) over the valid overlap.
fn add_shifted(out: &mut [f64], src: &[f64], shape: [usize; 3], off: [isize; 3], w: f64) {
    let [n0, n1, n2] = shape;
    let lo = |o: isize| (-o).max(0) as usize;
    let hi = |n: usize, o: isize| n - o.max(0) as usize;
    let (z0, z1) = (lo(off[0]), hi(n0, off[0]));
    let (y0, y1) = (lo(off[1]), hi(n1, off[1]));
    let (x0, x1) = (lo(off[2]), hi(n2, off[2]));
    if x0 >= x1 {
        return;
    }
    for z in z0..z1 {
        let zs = (z as isize + off[0]) as usize;
        for y in y0..y1 {
            let ys = (y as isize + off[1]) as usize;
            let ob = (z * n1 + y) * n2;
            let sb = ((zs * n1 + ys) * n2 as usize) as isize + off[2];
            let o = &mut out[ob + x0..ob + x1];
            let s = &src[(sb + x0 as isize) as usize..(sb + x1 as isize) as usize];
            for (ov, &sv) in o.iter_mut().zip(s) {
                *ov += w * sv;
            }
        }
    }
}

/// Σ a(p) * b(p + off) over the valid overlap.
fn dot_shifted(a: &[f64], b: &[f64], shape: [usize; 3], off: [isize; 3]) -> f64 {
    let [n0, n1, n2] = shape;
    let lo = |o: isize| (-o).max(0) as usize;
    let hi = |n: usize, o: isize| n - o.max(0) as usize;
    let (z0, z1) = (lo(off[0]), hi(n0, off[0]));
    let (y0, y1) = (lo(off[1]), hi(n1, off[1]));
    let (x0, x1) = (lo(off[2]), hi(n2, off[2]));
    if x0 >= x1 {
        return 0.0;
    }
    let mut sum = 0.0;
    for z in z0..z1 {
        let zs = (z as isize + off[0]) as usize;
        for y in y0..y1 {
            let ys = (y as isize + off[1]) as usize;
            let ab = (z * n1 + y) * n2;
            let bb = ((zs * n1 + ys) * n2) as isize + off[2];
            let av = &a[ab + x0..ab + x1];
            let bv = &b[(bb + x0 as isize) as usize..(bb + x1 as isize) as usize];
            let mut acc = 0.0;
            for (x, y) in av.iter().zip(bv) {
                acc += x * y;
            }
            sum += acc;
        }
    }
    sum
}

fn k3_offset(k: usize) -> [isize; 3] {
    [
        (k / 9) as isize - 1,
        ((k / 3) % 3) as isize - 1,
        (k % 3) as isize - 1,
    ]
}

// ------------------------------------------------------------ 3x3x3 conv

/// 3x3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3 {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out][in][27]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3 {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Conv3 {
        Conv3 {
            in_ch,
            out_ch,
            weight: uniform_init(rng, out_ch * in_ch * 27, in_ch * 27),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.in_ch);
        let sl = x.spatial_len();
        let shape = x.shape;
        let mut y = Tensor::zeros(self.out_ch, shape);
        exec::for_each_chunk_mut(&mut y.data, sl, |co, out| {
            out.fill(self.bias[co]);
            for ci in 0..self.in_ch {
                let xc = x.channel(ci);
                let wb = (co * self.in_ch + ci) * 27;
                for k in 0..27 {
                    add_shifted(out, xc, shape, k3_offset(k), self.weight[wb + k]);
                }
            }
        });
        y
    }

    /// Accumulates weight/bias grads, returns the input grad.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_y: &Tensor,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Tensor {
        let shape = x.shape;
        let sl = x.spatial_len();
        for co in 0..self.out_ch {
            grad_b[co] += grad_y.channel(co).iter().sum::<f64>();
        }
        exec::for_each_chunk_mut(grad_w, self.in_ch * 27, |co, gwc| {
            let gy = grad_y.channel(co);
            for ci in 0..self.in_ch {
                let xc = x.channel(ci);
                for k in 0..27 {
                    gwc[ci * 27 + k] += dot_shifted(gy, xc, shape, k3_offset(k));
                }
            }
        });
        let mut gx = Tensor::zeros(self.in_ch, shape);
        exec::for_each_chunk_mut(&mut gx.data, sl, |ci, gxc| {
            for co in 0..self.out_ch {
                let gy = grad_y.channel(co);
                let wb = (co * self.in_ch + ci) * 27;
                for k in 0..27 {
                    let [a, b, c] = k3_offset(k);
                    add_shifted(gxc, gy, shape, [-a, -b, -c], self.weight[wb + k]);
                }
            }
        });
        gx
    }
}

// ---------------------------------------------------- 2x2x2 stride-2 convs

fn k2_offset(k: usize) -> [usize; 3] {
    [k / 4, (k / 2) % 2, k % 2]
}

fn halved(shape: [usize; 3]) -> [usize; 3] {
    [shape[0] / 2, shape[1] / 2, shape[2] / 2]
}

/// Downsampling convolution: kernel 2, stride 2 (non-overlapping).
#[derive(Debug, Clone)]
pub struct ConvDown {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out][in][8]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvDown {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> ConvDown {
        ConvDown {
            in_ch,
            out_ch,
            weight: uniform_init(rng, out_ch * in_ch * 8, in_ch * 8),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [_, n1, n2] = x.shape;
        let m = halved(x.shape);
        let msl = m[0] * m[1] * m[2];
        let mut y = Tensor::zeros(self.out_ch, m);
        exec::for_each_chunk_mut(&mut y.data, msl, |co, out| {
            out.fill(self.bias[co]);
            for ci in 0..self.in_ch {
                let xc = x.channel(ci);
                let wb = (co * self.in_ch + ci) * 8;
                for k in 0..8 {
                    let w = self.weight[wb + k];
                    let [dz, dy, dx] = k2_offset(k);
                    for z in 0..m[0] {
                        let zr = (2 * z + dz) * n1;
                        for y_ in 0..m[1] {
                            let src_base = (zr + 2 * y_ + dy) * n2 + dx;
                            let dst_base = (z * m[1] + y_) * m[2];
                            for x_ in 0..m[2] {
                                out[dst_base + x_] += w * xc[src_base + 2 * x_];
                            }
                        }
                    }
                }
            }
        });
        y
    }

    pub fn backward(
        &self,
        x: &Tensor,
        grad_y: &Tensor,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Tensor {
        let [_, n1, n2] = x.shape;
        let m = grad_y.shape;
        let sl = x.spatial_len();
        for co in 0..self.out_ch {
            grad_b[co] += grad_y.channel(co).iter().sum::<f64>();
        }
        exec::for_each_chunk_mut(grad_w, self.in_ch * 8, |co, gwc| {
            let gy = grad_y.channel(co);
            for ci in 0..self.in_ch {
                let xc = x.channel(ci);
                for k in 0..8 {
                    let [dz, dy, dx] = k2_offset(k);
                    let mut acc = 0.0;
                    for z in 0..m[0] {
                        let zr = (2 * z + dz) * n1;
                        for y_ in 0..m[1] {
                            let src_base = (zr + 2 * y_ + dy) * n2 + dx;
                            let dst_base = (z * m[1] + y_) * m[2];
                            for x_ in 0..m[2] {
                                acc += gy[dst_base + x_] * xc[src_base + 2 * x_];
                            }
                        }
                    }
                    gwc[ci * 8 + k] += acc;
                }
            }
        });
        let mut gx = Tensor::zeros(self.in_ch, x.shape);
        exec::for_each_chunk_mut(&mut gx.data, sl, |ci, gxc| {
            for co in 0..self.out_ch {
                let gy = grad_y.channel(co);
                let wb = (co * self.in_ch + ci) * 8;
                for k in 0..8 {
                    let w = self.weight[wb + k];
                    let [dz, dy, dx] = k2_offset(k);
                    for z in 0..m[0] {
                        let zr = (2 * z + dz) * n1;
                        for y_ in 0..m[1] {
                            let src_base = (zr + 2 * y_ + dy) * n2 + dx;
                            let dst_base = (z * m[1] + y_) * m[2];
                            for x_ in 0..m[2] {
                                gxc[src_base + 2 * x_] += w * gy[dst_base + x_];
                            }
                        }
                    }
                }
            }
        });
        gx
    }
}

/// Transposed convolution: kernel 2, stride 2; doubles each spatial axis.
#[derive(Debug, Clone)]
pub struct ConvUp {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out][in][8]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvUp {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> ConvUp {
        ConvUp {
            in_ch,
            out_ch,
            weight: uniform_init(rng, out_ch * in_ch * 8, in_ch),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let m = x.shape;
        let n = [m[0] * 2, m[1] * 2, m[2] * 2];
        let nsl = n[0] * n[1] * n[2];
        let mut y = Tensor::zeros(self.out_ch, n);
        exec::for_each_chunk_mut(&mut y.data, nsl, |co, out| {
            out.fill(self.bias[co]);
            for ci in 0..self.in_ch {
                let xc = x.channel(ci);
                let wb = (co * self.in_ch + ci) * 8;
                for k in 0..8 {
                    let w = self.weight[wb + k];
                    let [dz, dy, dx] = k2_offset(k);
                    for z in 0..m[0] {
                        let zr = (2 * z + dz) * n[1];
                        for y_ in 0..m[1] {
                            let dst_base = (zr + 2 * y_ + dy) * n[2] + dx;
                            let src_base = (z * m[1] + y_) * m[2];
                            for x_ in 0..m[2] {
                                out[dst_base + 2 * x_] += w * xc[src_base + x_];
                            }
                        }
                    }
                }
            }
        });
        y
    }

    pub fn backward(
        &self,
        x: &Tensor,
        grad_y: &Tensor,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Tensor {
        let m = x.shape;
        let n = grad_y.shape;
        let sl = x.spatial_len();
        for co in 0..self.out_ch {
            grad_b[co] += grad_y.channel(co).iter().sum::<f64>();
        }
        exec::for_each_chunk_mut(grad_w, self.in_ch * 8, |co, gwc| {
            let gy = grad_y.channel(co);
            for ci in 0..self.in_ch {
                let xc = x.channel(ci);
                for k in 0..8 {
                    let [dz, dy, dx] = k2_offset(k);
                    let mut acc = 0.0;
                    for z in 0..m[0] {
                        let zr = (2 * z + dz) * n[1];
                        for y_ in 0..m[1] {
                            let dst_base = (zr + 2 * y_ + dy) * n[2] + dx;
                            let src_base = (z * m[1] + y_) * m[2];
                            for x_ in 0..m[2] {
                                acc += gy[dst_base + 2 * x_] * xc[src_base + x_];
                            }
                        }
                    }
                    gwc[ci * 8 + k] += acc;
                }
            }
        });
        let mut gx = Tensor::zeros(self.in_ch, m);
        exec::for_each_chunk_mut(&mut gx.data, sl, |ci, gxc| {
            for co in 0..self.out_ch {
                let gy = grad_y.channel(co);
                let wb = (co * self.in_ch + ci) * 8;
                for k in 0..8 {
                    let w = self.weight[wb + k];
                    let [dz, dy, dx] = k2_offset(k);
                    for z in 0..m[0] {
                        let zr = (2 * z + dz) * n[1];
                        for y_ in 0..m[1] {
                            let dst_base = (zr + 2 * y_ + dy) * n[2] + dx;
                            let src_base = (z * m[1] + y_) * m[2];
                            for x_ in 0..m[2] {
                                gxc[src_base + x_] += w * gy[dst_base + 2 * x_];
                            }
                        }
                    }
                }
            }
        });
        gx
    }
}

// ----------------------------------------------------------- instance norm

/// Per-channel instance normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub ch: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Forward cache: normalized activations and per-channel inverse stddev.
pub struct NormCache {
    pub hat: Tensor,
    pub inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn new(ch: usize) -> InstanceNorm {
        InstanceNorm {
            ch,
            gamma: vec![1.0; ch],
            beta: vec![0.0; ch],
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, NormCache) {
        let sl = x.spatial_len();
        let mut hat = Tensor::zeros(self.ch, x.shape);
        let mut inv_std = vec![0.0; self.ch];
        let stats: Vec<(f64, f64)> = exec::map_indexed(self.ch, |c| {
            let xc = x.channel(c);
            let mean = xc.iter().sum::<f64>() / sl as f64;
            let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / sl as f64;
            (mean, 1.0 / (var + NORM_EPS).sqrt())
        });
        exec::for_each_chunk_mut(&mut hat.data, sl, |c, out| {
            let (mean, inv) = stats[c];
            let xc = x.channel(c);
            for (o, &v) in out.iter_mut().zip(xc) {
                *o = (v - mean) * inv;
            }
        });
        for (c, &(_, inv)) in stats.iter().enumerate() {
            inv_std[c] = inv;
        }
        let mut y = Tensor::zeros(self.ch, x.shape);
        exec::for_each_chunk_mut(&mut y.data, sl, |c, out| {
            let hc = hat.channel(c);
            let (g, b) = (self.gamma[c], self.beta[c]);
            for (o, &h) in out.iter_mut().zip(hc) {
                *o = g * h + b;
            }
        });
        (y, NormCache { hat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &NormCache,
        grad_y: &Tensor,
        grad_gamma: &mut [f64],
        grad_beta: &mut [f64],
    ) -> Tensor {
        let sl = cache.hat.spatial_len();
        let n = sl as f64;
        for c in 0..self.ch {
            let gy = grad_y.channel(c);
            let hc = cache.hat.channel(c);
            grad_beta[c] += gy.iter().sum::<f64>();
            grad_gamma[c] += gy.iter().zip(hc).map(|(&g, &h)| g * h).sum::<f64>();
        }
        let mut gx = Tensor::zeros(self.ch, cache.hat.shape);
        exec::for_each_chunk_mut(&mut gx.data, sl, |c, out| {
            let gy = grad_y.channel(c);
            let hc = cache.hat.channel(c);
            let g = self.gamma[c];
            let inv = cache.inv_std[c];
            let sum_dhat: f64 = gy.iter().map(|&v| v * g).sum();
            let sum_dhat_hat: f64 = gy.iter().zip(hc).map(|(&v, &h)| v * g * h).sum();
            let mean_dhat = sum_dhat / n;
            let mean_dhat_hat = sum_dhat_hat / n;
            for i in 0..sl {
                let dhat = gy[i] * g;
                out[i] = inv * (dhat - mean_dhat - hc[i] * mean_dhat_hat);
            }
        });
        gx
    }
}

// ------------------------------------------------------------------- PReLU

/// Parametric ReLU with a learned per-channel slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub ch: usize,
    pub alpha: Vec<f64>,
}

impl PRelu {
    pub fn new(ch: usize) -> PRelu {
        PRelu {
            ch,
            alpha: vec![PRELU_INIT; ch],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let sl = x.spatial_len();
        let mut y = Tensor::zeros(self.ch, x.shape);
        exec::for_each_chunk_mut(&mut y.data, sl, |c, out| {
            let a = self.alpha[c];
            let xc = x.channel(c);
            for (o, &v) in out.iter_mut().zip(xc) {
                *o = if v > 0.0 { v } else { a * v };
            }
        });
        y
    }

    pub fn backward(&self, x: &Tensor, grad_y: &Tensor, grad_alpha: &mut [f64]) -> Tensor {
        let sl = x.spatial_len();
        for c in 0..self.ch {
            let xc = x.channel(c);
            let gy = grad_y.channel(c);
            grad_alpha[c] += xc
                .iter()
                .zip(gy)
                .filter(|(&v, _)| v <= 0.0)
                .map(|(&v, &g)| v * g)
                .sum::<f64>();
        }
        let mut gx = Tensor::zeros(self.ch, x.shape);
        exec::for_each_chunk_mut(&mut gx.data, sl, |c, out| {
            let a = self.alpha[c];
            let xc = x.channel(c);
            let gy = grad_y.channel(c);
            for i in 0..sl {
                out[i] = gy[i] * if xc[i] > 0.0 { 1.0 } else { a };
            }
        });
        gx
    }
}

// ------------------------------------------------------------- 1x1x1 head

/// 1x1x1 convolution to a single channel (pre-sigmoid head logits).
#[derive(Debug, Clone)]
pub struct HeadConv {
    pub in_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Start heads biased toward background so early training is not swamped
/// by false positives.
const HEAD_BIAS_INIT: f64 = -2.0;

impl HeadConv {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize) -> HeadConv {
        HeadConv {
            in_ch,
            weight: uniform_init(rng, in_ch, in_ch),
            bias: vec![HEAD_BIAS_INIT],
        }
    }

    /// Logits over the spatial grid.
    pub fn forward(&self, x: &Tensor) -> Vec<f64> {
        let sl = x.spatial_len();
        let mut out = vec![self.bias[0]; sl];
        for ci in 0..self.in_ch {
            let w = self.weight[ci];
            for (o, &v) in out.iter_mut().zip(x.channel(ci)) {
                *o += w * v;
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &Tensor,
        grad_logits: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        grad_x: &mut Tensor,
    ) {
        grad_b[0] += grad_logits.iter().sum::<f64>();
        for ci in 0..self.in_ch {
            let xc = x.channel(ci);
            grad_w[ci] += xc
                .iter()
                .zip(grad_logits)
                .map(|(&v, &g)| v * g)
                .sum::<f64>();
            let w = self.weight[ci];
            for (o, &g) in grad_x.channel_mut(ci).iter_mut().zip(grad_logits) {
                *o += w * g;
            }
        }
    }
}

pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

/// dL/dz from dL/dp for p = sigmoid(z).
pub fn sigmoid_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(grad_p)
        .map(|(&p, &g)| g * p * (1.0 - p))
        .collect()
}
