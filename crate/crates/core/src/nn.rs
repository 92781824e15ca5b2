//! Layer primitives with explicit forward/backward passes.
//!
//! Each layer owns slots in a [`ParamStore`]; forward returns whatever cache
//! its backward needs. Activations are f64 throughout. Image tensors are
//! CHW row-major; batched token tensors are rows x features.

use crate::linalg::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use crate::params::{GradBuf, ParamStore, Slot};
use crate::rng::Rng;

pub fn gelu(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax over `width`-sized chunks, in place.
pub fn softmax_rows(x: &mut [f64], width: usize) {
    for row in x.chunks_mut(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Fully connected layer, y = x W + b, weights d_in x d_out.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Slot,
    pub b: Option<Slot>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.alloc_uniform(&format!("{prefix}.w"), d_in * d_out, bound, rng);
        let b = bias.then(|| store.alloc(&format!("{prefix}.b"), d_out));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.d_out];
        if let Some(b) = self.b {
            let bias = store.get(b);
            for r in 0..rows {
                y[r * self.d_out..(r + 1) * self.d_out].copy_from_slice(bias);
            }
        }
        gemm_acc(&mut y, x, store.get(self.w), rows, self.d_in, self.d_out);
        y
    }

    /// Accumulates input gradients into `g_x` and parameter gradients into
    /// `grads`; `x` is the forward input.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        g_y: &[f64],
        rows: usize,
        grads: &mut GradBuf,
        g_x: &mut [f64],
    ) {
        gemm_a_bt_acc(g_x, g_y, store.get(self.w), rows, self.d_out, self.d_in);
        gemm_at_b_acc(grads.get_mut(self.w), x, g_y, rows, self.d_in, self.d_out);
        if let Some(b) = self.b {
            let gb = grads.get_mut(b);
            for r in 0..rows {
                for j in 0..self.d_out {
                    gb[j] += g_y[r * self.d_out + j];
                }
            }
        }
    }
}

/// 3x3 same-padding convolution over CHW tensors.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub w: Slot,
    pub b: Slot,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3x3 {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, c_in: usize, c_out: usize) -> Self {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        let w = store.alloc_uniform(&format!("{prefix}.w"), c_out * c_in * 9, bound, rng);
        let b = store.alloc(&format!("{prefix}.b"), c_out);
        Self { w, b, c_in, c_out }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], h: usize, wd: usize) -> Vec<f64> {
        let weights = store.get(self.w);
        let bias = store.get(self.b);
        let mut y = vec![0.0; self.c_out * h * wd];
        for co in 0..self.c_out {
            let plane = &mut y[co * h * wd..(co + 1) * h * wd];
            plane.fill(bias[co]);
            for ci in 0..self.c_in {
                let xin = &x[ci * h * wd..(ci + 1) * h * wd];
                let wk = &weights[(co * self.c_in + ci) * 9..(co * self.c_in + ci + 1) * 9];
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let wv = wk[dy * 3 + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        // output(y,x) += w * input(y+dy-1, x+dx-1)
                        let ylo = 1usize.saturating_sub(dy);
                        let yhi = (h + 1 - dy).min(h);
                        let xlo = 1usize.saturating_sub(dx);
                        let xhi = (wd + 1 - dx).min(wd);
                        for yy in ylo..yhi {
                            let src_row = (yy + dy - 1) * wd;
                            let dst_row = yy * wd;
                            for xx in xlo..xhi {
                                plane[dst_row + xx] += wv * xin[src_row + xx + dx - 1];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        g_y: &[f64],
        h: usize,
        wd: usize,
        grads: &mut GradBuf,
        g_x: &mut [f64],
    ) {
        let weights = store.get(self.w);
        for co in 0..self.c_out {
            let gy = &g_y[co * h * wd..(co + 1) * h * wd];
            let gb = &mut grads.get_mut(self.b)[co];
            for v in gy {
                *gb += v;
            }
            for ci in 0..self.c_in {
                let xin = &x[ci * h * wd..(ci + 1) * h * wd];
                let wk = &weights[(co * self.c_in + ci) * 9..(co * self.c_in + ci + 1) * 9];
                let gxin = &mut g_x[ci * h * wd..(ci + 1) * h * wd];
                let gwk_base = (co * self.c_in + ci) * 9;
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let wv = wk[dy * 3 + dx];
                        let mut gw = 0.0;
                        let ylo = 1usize.saturating_sub(dy);
                        let yhi = (h + 1 - dy).min(h);
                        let xlo = 1usize.saturating_sub(dx);
                        let xhi = (wd + 1 - dx).min(wd);
                        for yy in ylo..yhi {
                            let src_row = (yy + dy - 1) * wd;
                            let dst_row = yy * wd;
                            for xx in xlo..xhi {
                                let g = gy[dst_row + xx];
                                gw += g * xin[src_row + xx + dx - 1];
                                gxin[src_row + xx + dx - 1] += g * wv;
                            }
                        }
                        grads.get_mut(self.w)[gwk_base + dy * 3 + dx] += gw;
                    }
                }
            }
        }
    }
}

/// 1x1 convolution (pointwise channel mix) over CHW tensors.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub w: Slot,
    pub b: Slot,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1x1 {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, c_in: usize, c_out: usize) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        let w = store.alloc_uniform(&format!("{prefix}.w"), c_out * c_in, bound, rng);
        let b = store.alloc(&format!("{prefix}.b"), c_out);
        Self { w, b, c_in, c_out }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], hw: usize) -> Vec<f64> {
        let weights = store.get(self.w);
        let bias = store.get(self.b);
        let mut y = vec![0.0; self.c_out * hw];
        for co in 0..self.c_out {
            let plane = &mut y[co * hw..(co + 1) * hw];
            plane.fill(bias[co]);
            for ci in 0..self.c_in {
                let wv = weights[co * self.c_in + ci];
                if wv == 0.0 {
                    continue;
                }
                let xin = &x[ci * hw..(ci + 1) * hw];
                for p in 0..hw {
                    plane[p] += wv * xin[p];
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        g_y: &[f64],
        hw: usize,
        grads: &mut GradBuf,
        g_x: &mut [f64],
    ) {
        let weights = store.get(self.w);
        for co in 0..self.c_out {
            let gy = &g_y[co * hw..(co + 1) * hw];
            let gb = &mut grads.get_mut(self.b)[co];
            for v in gy {
                *gb += v;
            }
            for ci in 0..self.c_in {
                let xin = &x[ci * hw..(ci + 1) * hw];
                let gxin = &mut g_x[ci * hw..(ci + 1) * hw];
                let wv = weights[co * self.c_in + ci];
                let mut gw = 0.0;
                for p in 0..hw {
                    gw += gy[p] * xin[p];
                    gxin[p] += gy[p] * wv;
                }
                grads.get_mut(self.w)[co * self.c_in + ci] += gw;
            }
        }
    }
}

/// 2x2 max pooling; returns pooled tensor and argmax indices for backward.
pub fn maxpool2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut y = vec![0.0; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let xin = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if xin[idx] > best {
                            best = xin[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                y[ch * oh * ow + oy * ow + ox] = best;
                arg[ch * oh * ow + oy * ow + ox] = best_idx;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(
    g_y: &[f64],
    arg: &[u32],
    c: usize,
    h: usize,
    w: usize,
    g_x: &mut [f64],
) {
    let oh = h / 2;
    let ow = w / 2;
    for ch in 0..c {
        for o in 0..oh * ow {
            g_x[ch * h * w + arg[ch * oh * ow + o] as usize] += g_y[ch * oh * ow + o];
        }
    }
}

/// Nearest-neighbor 2x upsampling over CHW.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h * 2;
    let ow = w * 2;
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let v = x[ch * h * w + yy * w + xx];
                let base = ch * oh * ow + 2 * yy * ow + 2 * xx;
                y[base] = v;
                y[base + 1] = v;
                y[base + ow] = v;
                y[base + ow + 1] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward(g_y: &[f64], c: usize, h: usize, w: usize, g_x: &mut [f64]) {
    let oh = h * 2;
    let ow = w * 2;
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let base = ch * oh * ow + 2 * yy * ow + 2 * xx;
                g_x[ch * h * w + yy * w + xx] +=
                    g_y[base] + g_y[base + 1] + g_y[base + ow] + g_y[base + ow + 1];
            }
        }
    }
}

/// Layer normalization over the last dimension with learnable scale/offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: Slot,
    pub offset: Slot,
    pub dim: usize,
}

pub struct LayerNormCache {
    normed: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let scale = store.alloc_const(&format!("{prefix}.scale"), dim, 1.0);
        let offset = store.alloc(&format!("{prefix}.offset"), dim);
        Self { scale, offset, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], rows: usize) -> (Vec<f64>, LayerNormCache) {
        let scale = store.get(self.scale);
        let offset = store.get(self.offset);
        let d = self.dim;
        let mut y = vec![0.0; rows * d];
        let mut normed = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + Self::EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let n = (row[c] - mean) * istd;
                normed[r * d + c] = n;
                y[r * d + c] = scale[c] * n + offset[c];
            }
        }
        (y, LayerNormCache { normed, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        g_y: &[f64],
        rows: usize,
        grads: &mut GradBuf,
        g_x: &mut [f64],
    ) {
        let scale = store.get(self.scale);
        let d = self.dim;
        for r in 0..rows {
            let n = &cache.normed[r * d..(r + 1) * d];
            let gy = &g_y[r * d..(r + 1) * d];
            let istd = cache.inv_std[r];
            let mut mean_gn = 0.0;
            let mut mean_gn_n = 0.0;
            for c in 0..d {
                grads.get_mut(self.scale)[c] += gy[c] * n[c];
                grads.get_mut(self.offset)[c] += gy[c];
                let gn = gy[c] * scale[c];
                mean_gn += gn;
                mean_gn_n += gn * n[c];
            }
            mean_gn /= d as f64;
            mean_gn_n /= d as f64;
            let gx = &mut g_x[r * d..(r + 1) * d];
            for c in 0..d {
                let gn = gy[c] * scale[c];
                gx[c] += istd * (gn - mean_gn - n[c] * mean_gn_n);
            }
        }
    }
}

/// Elementwise GELU with cache-free backward (recomputes from input).
pub fn gelu_forward(x: &mut [f64]) -> Vec<f64> {
    let pre = x.to_vec();
    for v in x.iter_mut() {
        *v = gelu(*v);
    }
    pre
}

pub fn gelu_backward(pre: &[f64], g_y: &[f64], g_x: &mut [f64]) {
    for i in 0..pre.len() {
        g_x[i] += g_y[i] * gelu_grad(pre[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-5;
        let mut xp = x.to_vec();
        xp[i] += h;
        let fp = f(&xp);
        xp[i] -= 2.0 * h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let lin = Linear::init(&mut store, &mut rng, "l", 3, 2, true);
        let x = vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3];
        let loss = |s: &ParamStore| -> f64 {
            lin.forward(s, &x, 2).iter().map(|v| v * v).sum::<f64>()
        };
        let y = lin.forward(&store, &x, 2);
        let g_y: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let mut grads = GradBuf::zeros_like(&store);
        let mut g_x = vec![0.0; x.len()];
        lin.backward(&store, &x, &g_y, 2, &mut grads, &mut g_x);
        // parameter gradient check
        for i in 0..store.len() {
            let h = 1e-6;
            let mut s2 = store.clone();
            s2.data_mut()[i] += h;
            let fp = loss(&s2);
            s2.data_mut()[i] -= 2.0 * h;
            let fm = loss(&s2);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grads.data()[i]).abs() < 1e-6, "param {i}");
        }
        // input gradient check
        let loss_x = |xv: &[f64]| -> f64 {
            lin.forward(&store, xv, 2).iter().map(|v| v * v).sum::<f64>()
        };
        for i in 0..x.len() {
            let fd = fd_grad(loss_x, &x, i);
            assert!((fd - g_x[i]).abs() < 1e-6, "input {i}");
        }
    }

    #[test]
    fn conv3x3_backward_matches_fd() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let conv = Conv3x3::init(&mut store, &mut rng, "c", 2, 3);
        let h = 4;
        let w = 4;
        let x: Vec<f64> = (0..2 * h * w).map(|_| rng.uniform(1.0)).collect();
        let y = conv.forward(&store, &x, h, w);
        let g_y: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let mut grads = GradBuf::zeros_like(&store);
        let mut g_x = vec![0.0; x.len()];
        conv.backward(&store, &x, &g_y, h, w, &mut grads, &mut g_x);

        let loss = |s: &ParamStore, xv: &[f64]| -> f64 {
            conv.forward(s, xv, h, w).iter().map(|v| v * v).sum::<f64>()
        };
        for i in (0..store.len()).step_by(7) {
            let fd = {
                let hh = 1e-6;
                let mut s2 = store.clone();
                s2.data_mut()[i] += hh;
                let fp = loss(&s2, &x);
                s2.data_mut()[i] -= 2.0 * hh;
                let fm = loss(&s2, &x);
                (fp - fm) / (2.0 * hh)
            };
            assert!((fd - grads.data()[i]).abs() < 1e-5, "param {i}: {fd} vs {}", grads.data()[i]);
        }
        for i in (0..x.len()).step_by(5) {
            let fd = fd_grad(|xv| loss(&store, xv), &x, i);
            assert!((fd - g_x[i]).abs() < 1e-5, "input {i}");
        }
    }

    #[test]
    fn pool_and_upsample_roundtrip_shapes() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64).collect();
        let (y, arg) = maxpool2(&x, 2, 4, 4);
        assert_eq!(y.len(), 2 * 2 * 2);
        // max of each 2x2 block is its bottom-right element for a ramp
        assert_eq!(y[0], 5.0);
        let mut g_x = vec![0.0; x.len()];
        maxpool2_backward(&[1.0; 8], &arg, 2, 4, 4, &mut g_x);
        assert_eq!(g_x.iter().sum::<f64>(), 8.0);

        let up = upsample2(&x, 2, 4, 4);
        assert_eq!(up.len(), 2 * 8 * 8);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[1], 0.0);
        assert_eq!(up[8 * 8 - 1], 15.0); // bottom-right of channel 0
        let mut g = vec![0.0; x.len()];
        upsample2_backward(&vec![1.0; up.len()], 2, 4, 4, &mut g);
        assert!(g.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn layernorm_backward_matches_fd() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::init(&mut store, "ln", 4);
        // non-trivial scale/offset
        store.get_mut(ln.scale).copy_from_slice(&[1.2, 0.8, 1.0, -0.5]);
        store.get_mut(ln.offset).copy_from_slice(&[0.1, -0.2, 0.0, 0.3]);
        let x = vec![0.5, -1.0, 2.0, 0.7, 1.0, 1.1, 0.9, 1.05];
        let loss = |s: &ParamStore, xv: &[f64]| -> f64 {
            let (y, _) = ln.forward(s, xv, 2);
            y.iter().map(|v| v * v * 0.5).sum::<f64>()
        };
        let (y, cache) = ln.forward(&store, &x, 2);
        let mut grads = GradBuf::zeros_like(&store);
        let mut g_x = vec![0.0; x.len()];
        ln.backward(&store, &cache, &y, 2, &mut grads, &mut g_x);
        for i in 0..x.len() {
            let fd = fd_grad(|xv| loss(&store, xv), &x, i);
            assert!((fd - g_x[i]).abs() < 1e-6, "input {i}: {fd} vs {}", g_x[i]);
        }
        for i in 0..store.len() {
            let hh = 1e-6;
            let mut s2 = store.clone();
            s2.data_mut()[i] += hh;
            let fp = loss(&s2, &x);
            s2.data_mut()[i] -= 2.0 * hh;
            let fm = loss(&s2, &x);
            let fd = (fp - fm) / (2.0 * hh);
            assert!((fd - grads.data()[i]).abs() < 1e-6, "param {i}");
        }
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
