//! Dense layers with explicit backward passes. Convolutions go through
//! im2col and a single matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::params::{DetectorParams, Group, Slot, TensorKind};

/// Channel-major feature grid for a single image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` where the post-activation output was not positive.
pub fn relu_backward(out: &FeatureMap, grad: &mut FeatureMap) {
    grad.data.iter_mut().zip(&out.data).for_each(|(g, &o)| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Slot,
    pub bias: Slot,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new(params: &mut DetectorParams, group: Group, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let weight = params.push_tensor(group, format!("{name}.weight"), &[cout, cin, kernel, kernel], TensorKind::Weight);
        let bias = params.push_tensor(group, format!("{name}.bias"), &[cout], TensorKind::Bias);
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            weight,
            bias,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &FeatureMap, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return x.data.clone();
        }
        let ohw = oh * ow;
        let mut cols = vec![0.0; self.cin * k * k * ohw];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..][..x.width];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < x.width {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> FeatureMap {
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return FeatureMap {
                channels: self.cin,
                height: h,
                width: w,
                data: cols.to_vec(),
            };
        }
        let ohw = oh * ow;
        let mut out = FeatureMap::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut out.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for (ox, &g) in row[oy * ow..][..ow].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &DetectorParams, x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.cin, "conv input channel mismatch");
        let (oh, ow) = self.out_size(x.height, x.width);
        let ckk = self.cin * self.kernel * self.kernel;
        let cols = self.im2col(x, oh, ow);
        let mut out = FeatureMap::zeros(self.cout, oh, ow);
        {
            let w = ArrayView2::from_shape((self.cout, ckk), params.slice(self.weight)).expect("weight shape");
            let c = ArrayView2::from_shape((ckk, oh * ow), &cols).expect("cols shape");
            let mut o = ArrayViewMut2::from_shape((self.cout, oh * ow), &mut out.data).expect("out shape");
            general_mat_mul(1.0, &w, &c, 0.0, &mut o);
        }
        let bias = params.slice(self.bias);
        for (co, chunk) in out.data.chunks_mut(oh * ow).enumerate() {
            let b = bias[co];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let cache = ConvCache {
            cols,
            in_h: x.height,
            in_w: x.width,
            out_h: oh,
            out_w: ow,
        };
        (out, cache)
    }

    /// Accumulates weight/bias gradients into `grads` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        params: &DetectorParams,
        cache: &ConvCache,
        gout: &FeatureMap,
        grads: &mut DetectorParams,
        need_input: bool,
    ) -> Option<FeatureMap> {
        let ohw = cache.out_h * cache.out_w;
        let ckk = self.cin * self.kernel * self.kernel;
        let g = ArrayView2::from_shape((self.cout, ohw), &gout.data).expect("grad shape");
        {
            let c = ArrayView2::from_shape((ckk, ohw), &cache.cols).expect("cols shape");
            let mut dw = ArrayViewMut2::from_shape((self.cout, ckk), grads.slice_mut(self.weight)).expect("dw shape");
            general_mat_mul(1.0, &g, &c.t(), 1.0, &mut dw);
        }
        let db = grads.slice_mut(self.bias);
        for (co, chunk) in gout.data.chunks(ohw).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        if !need_input {
            return None;
        }
        let w = ArrayView2::from_shape((self.cout, ckk), params.slice(self.weight)).expect("weight shape");
        let mut dcols = vec![0.0; ckk * ohw];
        {
            let mut dc = ArrayViewMut2::from_shape((ckk, ohw), &mut dcols).expect("dcols shape");
            general_mat_mul(1.0, &w.t(), &g, 0.0, &mut dc);
        }
        Some(self.col2im(&dcols, cache.in_h, cache.in_w, cache.out_h, cache.out_w))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: Slot,
    pub bias: Option<Slot>,
}

impl Linear {
    pub fn new(params: &mut DetectorParams, group: Group, name: &str, din: usize, dout: usize, with_bias: bool) -> Self {
        let weight = params.push_tensor(group, format!("{name}.weight"), &[dout, din], TensorKind::Weight);
        let bias = with_bias.then(|| params.push_tensor(group, format!("{name}.bias"), &[dout], TensorKind::Bias));
        Self { din, dout, weight, bias }
    }

    pub fn forward(&self, params: &DetectorParams, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.din, "linear input size mismatch");
        let w = params.slice(self.weight);
        let mut out: Vec<f64> = (0..self.dout)
            .map(|o| w[o * self.din..(o + 1) * self.din].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        if let Some(b) = self.bias {
            out.iter_mut().zip(params.slice(b)).for_each(|(o, b)| *o += b);
        }
        out
    }

    pub fn backward(&self, params: &DetectorParams, x: &[f64], gout: &[f64], grads: &mut DetectorParams) -> Vec<f64> {
        {
            let dw = grads.slice_mut(self.weight);
            for (o, &g) in gout.iter().enumerate() {
                for (d, &xi) in dw[o * self.din..(o + 1) * self.din].iter_mut().zip(x) {
                    *d += g * xi;
                }
            }
        }
        if let Some(b) = self.bias {
            grads.slice_mut(b).iter_mut().zip(gout).for_each(|(d, g)| *d += g);
        }
        let w = params.slice(self.weight);
        let mut gin = vec![0.0; self.din];
        for (o, &g) in gout.iter().enumerate() {
            for (gi, &wv) in gin.iter_mut().zip(&w[o * self.din..(o + 1) * self.din]) {
                *gi += g * wv;
            }
        }
        gin
    }
}

/// Nearest-neighbour 2x upsampling cropped to `(h, w)`.
pub fn upsample2x(x: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            let sy = (y / 2).min(x.height - 1);
            for xx in 0..w {
                let sx = (xx / 2).min(x.width - 1);
                out.data[(c * h + y) * w + xx] = x.at(c, sy, sx);
            }
        }
    }
    out
}

pub fn upsample2x_backward(g: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(g.channels, h, w);
    for c in 0..g.channels {
        for y in 0..g.height {
            let sy = (y / 2).min(h - 1);
            for x in 0..g.width {
                let sx = (x / 2).min(w - 1);
                out.data[(c * h + sy) * w + sx] += g.at(c, y, x);
            }
        }
    }
    out
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::kaiming_init;

    fn conv_fixture(k: usize, stride: usize) -> (DetectorParams, Conv2d, FeatureMap) {
        let mut p = DetectorParams::default();
        let conv = Conv2d::new(&mut p, Group::Backbone, "c", 2, 3, k, stride);
        kaiming_init(&mut p, 5);
        for (i, b) in p.slice_mut(conv.bias).iter_mut().enumerate() {
            *b = 0.1 * i as f64;
        }
        let x = FeatureMap {
            channels: 2,
            height: 5,
            width: 6,
            data: (0..60).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect(),
        };
        (p, conv, x)
    }

    fn naive_conv(p: &DetectorParams, conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = conv.out_size(x.height, x.width);
        let w = p.slice(conv.weight);
        let b = p.slice(conv.bias);
        let k = conv.kernel;
        let mut out = FeatureMap::zeros(conv.cout, oh, ow);
        for co in 0..conv.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    s += w[((co * conv.cin + ci) * k + ky) * k + kx] * x.at(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let (p, conv, x) = conv_fixture(k, s);
            let (out, _) = conv.forward(&p, &x);
            let expect = naive_conv(&p, &conv, &x);
            assert_eq!(out.height, expect.height);
            for (a, b) in out.data.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_conv_output_is_ceil_half() {
        let (_, conv, _) = conv_fixture(3, 2);
        assert_eq!(conv.out_size(32, 32), (16, 16));
        assert_eq!(conv.out_size(5, 6), (3, 3));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for (k, s) in [(3, 2), (1, 1)] {
            let (mut p, conv, x) = conv_fixture(k, s);
            // loss = sum(out * r) for a fixed r
            let (out, cache) = conv.forward(&p, &x);
            let r: Vec<f64> = (0..out.data.len()).map(|i| ((i * 3 % 7) as f64 - 3.0) / 3.0).collect();
            let gout = FeatureMap { data: r.clone(), ..out.clone() };
            let mut grads = p.zeros_like();
            let gin = conv.backward(&p, &cache, &gout, &mut grads, true).unwrap();
            let loss = |p: &DetectorParams, x: &FeatureMap| -> f64 {
                conv.forward(p, x).0.data.iter().zip(&r).map(|(a, b)| a * b).sum()
            };
            let eps = 1e-6;
            for i in 0..p.values(Group::Backbone).len() {
                let orig = p.values(Group::Backbone)[i];
                p.values_mut(Group::Backbone)[i] = orig + eps;
                let lp = loss(&p, &x);
                p.values_mut(Group::Backbone)[i] = orig - eps;
                let lm = loss(&p, &x);
                p.values_mut(Group::Backbone)[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - grads.values(Group::Backbone)[i]).abs() < 1e-6);
            }
            for i in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps);
                assert!((fd - gin.data[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = FeatureMap {
            channels: 1,
            height: 2,
            width: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let up = upsample2x(&x, 4, 5);
        assert_eq!(up.at(0, 3, 4), 6.0);
        let g = FeatureMap {
            data: (0..20).map(f64::from).collect(),
            ..up.clone()
        };
        let back = upsample2x_backward(&g, 2, 3);
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_backward() {
        let mut p = DetectorParams::default();
        let lin = Linear::new(&mut p, Group::Projection, "fc", 3, 2, true);
        kaiming_init(&mut p, 2);
        let x = [0.5, -1.0, 2.0];
        let g = [1.0, -2.0];
        let mut grads = p.zeros_like();
        let gin = lin.backward(&p, &x, &g, &mut grads);
        let w = p.slice(lin.weight);
        assert!((gin[0] - (w[0] - 2.0 * w[3])).abs() < 1e-12);
        assert_eq!(grads.slice(lin.bias.unwrap()), &[1.0, -2.0]);
    }
}
