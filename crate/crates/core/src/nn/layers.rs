//! Layer primitives over a flat parameter buffer.
//!
//! Layers are descriptors holding offsets into a model's flat `&[f64]`
//! parameter vector; gradients accumulate into a buffer of the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, FeatureMap};

/// Hands out consecutive offsets in a flat parameter buffer.
#[derive(Debug, Default, Clone)]
pub struct ParamAllocator {
    len: usize,
}

impl ParamAllocator {
    pub fn alloc(&mut self, n: usize) -> usize {
        let at = self.len;
        self.len += n;
        at
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// x * sigmoid(x); smooth, so finite differences behave everywhere.
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    /// Derivative at pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// How a layer's weights are drawn at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// U(-sqrt(6/fan_in), sqrt(6/fan_in)); for layers followed by a rectifier.
    HeUniform,
    /// U(-sqrt(3/fan_in), sqrt(3/fan_in)); for linear outputs.
    LecunUniform,
    Zeros,
}

impl Init {
    pub fn fill(self, weights: &mut [f64], fan_in: usize, rng: &mut impl Rng) {
        let bound = match self {
            Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
            Init::LecunUniform => (3.0 / fan_in as f64).sqrt(),
            Init::Zeros => {
                weights.fill(0.0);
                return;
            }
        };
        for w in weights {
            *w = rng.gen_range(-bound..bound);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub init: Init,
    weight: usize,
    bias: usize,
}

impl Conv2d {
    pub fn new(alloc: &mut ParamAllocator, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, init: Init) -> Self {
        let weight = alloc.alloc(out_ch * in_ch * kernel * kernel);
        let bias = alloc.alloc(out_ch);
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
            init,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * (self.in_ch * self.kernel * self.kernel + 1)
    }

    /// Flat range covering this layer's weights and bias.
    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.weight..self.bias + self.out_ch
    }

    fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn weights_len(&self) -> usize {
        self.out_ch * self.fan_in()
    }

    pub fn init_params(&self, params: &mut [f64], rng: &mut impl Rng) {
        let n = self.weights_len();
        self.init.fill(&mut params[self.weight..self.weight + n], self.fan_in(), rng);
        params[self.bias..self.bias + self.out_ch].fill(0.0);
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &FeatureMap, oh: usize, ow: usize) -> Vec<f64> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (x.height as isize, x.width as isize);
        let cols_n = oh * ow;
        let mut cols = vec![0.0; self.fan_in() * cols_n];
        for c in 0..self.in_ch {
            let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], in_shape: (usize, usize, usize), oh: usize, ow: usize) -> FeatureMap {
        let (c_in, h, w) = in_shape;
        if self.is_pointwise() {
            return FeatureMap::from_vec(c_in, h, w, cols.to_vec());
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cols_n = oh * ow;
        let mut dx = FeatureMap::zeros(c_in, h, w);
        for c in 0..c_in {
            let plane = &mut dx.data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_size(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let n = oh * ow;
        let mut y = vec![0.0; self.out_ch * n];
        for (o, row) in y.chunks_exact_mut(n).enumerate() {
            row.fill(params[self.bias + o]);
        }
        let w = &params[self.weight..self.weight + self.weights_len()];
        gemm(self.out_ch, self.fan_in(), n, w, false, &cols, false, &mut y, 1.0);
        (
            FeatureMap::from_vec(self.out_ch, oh, ow, y),
            ConvCache {
                in_shape: x.shape(),
                cols,
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        cache: &ConvCache,
        dy: &FeatureMap,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let n = dy.plane();
        let fan_in = self.fan_in();
        let wl = self.weights_len();
        gemm(
            self.out_ch,
            n,
            fan_in,
            &dy.data,
            false,
            &cache.cols,
            true,
            &mut grads[self.weight..self.weight + wl],
            1.0,
        );
        for (o, row) in dy.data.chunks_exact(n).enumerate() {
            grads[self.bias + o] += row.iter().sum::<f64>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; fan_in * n];
        gemm(
            fan_in,
            self.out_ch,
            n,
            &params[self.weight..self.weight + wl],
            true,
            &dy.data,
            false,
            &mut dcols,
            0.0,
        );
        Some(self.col2im(&dcols, cache.in_shape, dy.height, dy.width))
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    in_shape: (usize, usize, usize),
    cols: Vec<f64>,
}

/// Convolution followed by an optional pointwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvAct {
    pub conv: Conv2d,
    pub act: Option<Activation>,
}

#[derive(Debug, Clone)]
pub struct ConvActCache {
    conv: ConvCache,
    pre: Option<FeatureMap>,
}

impl ConvAct {
    pub fn new(
        alloc: &mut ParamAllocator,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        act: Option<Activation>,
    ) -> Self {
        let init = if act.is_some() { Init::HeUniform } else { Init::LecunUniform };
        Self {
            conv: Conv2d::new(alloc, in_ch, out_ch, kernel, stride, init),
            act,
        }
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, ConvActCache) {
        let (pre, conv) = self.conv.forward(params, x);
        match self.act {
            Some(act) => {
                let mut out = pre.clone();
                out.data.iter_mut().for_each(|v| *v = act.apply(*v));
                (out, ConvActCache { conv, pre: Some(pre) })
            }
            None => (pre, ConvActCache { conv, pre: None }),
        }
    }

    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        cache: &ConvActCache,
        mut dy: FeatureMap,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        if let (Some(act), Some(pre)) = (self.act, &cache.pre) {
            for (g, &x) in dy.data.iter_mut().zip(&pre.data) {
                *g *= act.derivative(x);
            }
        }
        self.conv.backward(params, grads, &cache.conv, &dy, need_input_grad)
    }
}

/// 2x2 average pooling with stride 2 (odd trailing rows/columns dropped).
pub fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &src[2 * oy * x.width..];
            let r1 = &src[(2 * oy + 1) * x.width..];
            for ox in 0..ow {
                dst[oy * ow + ox] = 0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &FeatureMap, in_shape: (usize, usize, usize)) -> FeatureMap {
    let (c_in, h, w) = in_shape;
    let mut dx = FeatureMap::zeros(c_in, h, w);
    for c in 0..c_in {
        let src = &dy.data[c * dy.plane()..(c + 1) * dy.plane()];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for oy in 0..dy.height {
            for ox in 0..dy.width {
                let g = 0.25 * src[oy * dy.width + ox];
                dst[2 * oy * w + 2 * ox] += g;
                dst[2 * oy * w + 2 * ox + 1] += g;
                dst[(2 * oy + 1) * w + 2 * ox] += g;
                dst[(2 * oy + 1) * w + 2 * ox + 1] += g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (oh, ow) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * x.width + ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &FeatureMap) -> FeatureMap {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = FeatureMap::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let src = &dy.data[c * dy.plane()..(c + 1) * dy.plane()];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for oy in 0..dy.height {
            for ox in 0..dy.width {
                dst[(oy / 2) * w + ox / 2] += src[oy * dy.width + ox];
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = x.plane() as f64;
    x.data.chunks_exact(x.plane()).map(|p| p.iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(dy: &[f64], in_shape: (usize, usize, usize)) -> FeatureMap {
    let (c, h, w) = in_shape;
    let n = (h * w) as f64;
    let mut data = Vec::with_capacity(c * h * w);
    for &g in dy {
        data.extend(std::iter::repeat_n(g / n, h * w));
    }
    FeatureMap::from_vec(c, h, w, data)
}

/// Fully connected layer `y = W x + b` with `W` stored row-major (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn new(alloc: &mut ParamAllocator, in_dim: usize, out_dim: usize) -> Self {
        let weight = alloc.alloc(in_dim * out_dim);
        let bias = alloc.alloc(out_dim);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.weight..self.bias + self.out_dim
    }

    pub fn init_params(&self, params: &mut [f64], rng: &mut impl Rng) {
        Init::LecunUniform.fill(&mut params[self.weight..self.weight + self.in_dim * self.out_dim], self.in_dim, rng);
        params[self.bias..self.bias + self.out_dim].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim, "linear input size");
        let w = &params[self.weight..self.weight + self.in_dim * self.out_dim];
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                params[self.bias + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            let row = self.weight + o * self.in_dim;
            for i in 0..self.in_dim {
                grads[row + i] += g * x[i];
                dx[i] += g * params[row + i];
            }
            grads[self.bias + o] += g;
        }
        dx
    }
}

/// Residual bottleneck: 1x1 reduce, 3x3 (strided), 1x1 expand, plus an
/// identity or 1x1 projection shortcut, followed by ReLU. The expand
/// convolution starts at zero so every block begins as the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    reduce: ConvAct,
    spatial: ConvAct,
    expand: ConvAct,
    shortcut: Option<Conv2d>,
    act: Activation,
}

#[derive(Debug, Clone)]
pub struct BottleneckCache {
    reduce: ConvActCache,
    spatial: ConvActCache,
    expand: ConvActCache,
    shortcut: Option<ConvCache>,
    sum: FeatureMap,
}

impl Bottleneck {
    pub fn new(alloc: &mut ParamAllocator, in_ch: usize, mid_ch: usize, out_ch: usize, stride: usize, act: Activation) -> Self {
        let reduce = ConvAct::new(alloc, in_ch, mid_ch, 1, 1, Some(act));
        let spatial = ConvAct::new(alloc, mid_ch, mid_ch, 3, stride, Some(act));
        let mut expand = ConvAct::new(alloc, mid_ch, out_ch, 1, 1, None);
        expand.conv.init = Init::Zeros;
        let shortcut =
            (in_ch != out_ch || stride != 1).then(|| Conv2d::new(alloc, in_ch, out_ch, 1, stride, Init::LecunUniform));
        Self {
            reduce,
            spatial,
            expand,
            shortcut,
            act,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand.conv.out_ch
    }

    pub fn param_count(&self) -> usize {
        self.reduce.conv.param_count()
            + self.spatial.conv.param_count()
            + self.expand.conv.param_count()
            + self.shortcut.as_ref().map_or(0, Conv2d::param_count)
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        let end = self
            .shortcut
            .as_ref()
            .map_or(self.expand.conv.param_range().end, |s| s.param_range().end);
        self.reduce.conv.param_range().start..end
    }

    pub fn init_params(&self, params: &mut [f64], rng: &mut impl Rng) {
        self.reduce.conv.init_params(params, rng);
        self.spatial.conv.init_params(params, rng);
        self.expand.conv.init_params(params, rng);
        if let Some(s) = &self.shortcut {
            s.init_params(params, rng);
        }
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, BottleneckCache) {
        let (h1, reduce) = self.reduce.forward(params, x);
        let (h2, spatial) = self.spatial.forward(params, &h1);
        let (mut sum, expand) = self.expand.forward(params, &h2);
        let shortcut = match &self.shortcut {
            Some(conv) => {
                let (s, cache) = conv.forward(params, x);
                sum.add_assign(&s);
                Some(cache)
            }
            None => {
                sum.add_assign(x);
                None
            }
        };
        let mut out = sum.clone();
        out.data.iter_mut().for_each(|v| *v = self.act.apply(*v));
        (
            out,
            BottleneckCache {
                reduce,
                spatial,
                expand,
                shortcut,
                sum,
            },
        )
    }

    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        cache: &BottleneckCache,
        mut dy: FeatureMap,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        for (g, &x) in dy.data.iter_mut().zip(&cache.sum.data) {
            *g *= self.act.derivative(x);
        }
        let d_short = match (&self.shortcut, &cache.shortcut) {
            (Some(conv), Some(c)) => conv.backward(params, grads, c, &dy, need_input_grad),
            _ => need_input_grad.then(|| dy.clone()),
        };
        let dh2 = self.expand.backward(params, grads, &cache.expand, dy, true).expect("input grad");
        let dh1 = self.spatial.backward(params, grads, &cache.spatial, dh2, true).expect("input grad");
        let dx = self.reduce.backward(params, grads, &cache.reduce, dh1, need_input_grad);
        match (dx, d_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }
}
