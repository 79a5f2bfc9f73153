use std::ops::Range;

use super::layers::{avg_pool2, avg_pool2_backward, Bottleneck, BottleneckCache, ConvAct, ConvActCache};
use super::tensor::FeatureMap;
use crate::seed::rng_for;

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvAct),
    Pool,
    Bottleneck(Bottleneck),
}

impl Layer {
    pub fn param_range(&self) -> Range<usize> {
        match self {
            Layer::Conv(c) => c.conv.param_range(),
            Layer::Pool => 0..0,
            Layer::Bottleneck(b) => b.param_range(),
        }
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> FeatureMap {
        self.forward_cached(params, x).0
    }

    fn forward_cached(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, LayerCache) {
        match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward(params, x);
                (y, LayerCache::Conv(cache))
            }
            Layer::Pool => (avg_pool2(x), LayerCache::Pool(x.shape())),
            Layer::Bottleneck(b) => {
                let (y, cache) = b.forward(params, x);
                (y, LayerCache::Bottleneck(Box::new(cache)))
            }
        }
    }

    fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        cache: &LayerCache,
        dy: FeatureMap,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(cache)) => c.backward(params, grads, cache, dy, need_input_grad),
            (Layer::Pool, LayerCache::Pool(shape)) => need_input_grad.then(|| avg_pool2_backward(&dy, *shape)),
            (Layer::Bottleneck(b), LayerCache::Bottleneck(cache)) => {
                b.backward(params, grads, cache, dy, need_input_grad)
            }
            _ => unreachable!("layer/cache kinds always pair up"),
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv(ConvActCache),
    Pool((usize, usize, usize)),
    Bottleneck(Box<BottleneckCache>),
}

/// A feed-forward convolutional trunk organised in stages. The output of
/// every stage is exposed as a tap (skip connection for U-shaped decoders);
/// the last tap is the final feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    stages: Vec<Vec<Layer>>,
    tap_channels: Vec<usize>,
    /// Cumulative downsampling factor at each tap.
    tap_strides: Vec<usize>,
    param_len: usize,
}

/// Activations retained by a training forward pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    caches: Vec<Vec<LayerCache>>,
    pub taps: Vec<FeatureMap>,
}

impl Backbone {
    pub fn new(stages: Vec<Vec<Layer>>, tap_channels: Vec<usize>, tap_strides: Vec<usize>, param_len: usize) -> Self {
        assert_eq!(stages.len(), tap_channels.len());
        assert_eq!(stages.len(), tap_strides.len());
        Self {
            stages,
            tap_channels,
            tap_strides,
            param_len,
        }
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn tap_channels(&self) -> &[usize] {
        &self.tap_channels
    }

    pub fn tap_strides(&self) -> &[usize] {
        &self.tap_strides
    }

    pub fn total_stride(&self) -> usize {
        *self.tap_strides.last().expect("at least one stage")
    }

    pub fn out_channels(&self) -> usize {
        *self.tap_channels.last().expect("at least one stage")
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.stages.iter().flatten()
    }

    /// Seeded parameter initialization; each layer draws from its own stream.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.param_len];
        for (i, layer) in self.layers().enumerate() {
            let mut rng = rng_for(seed, &[0xBAC0, i as u64]);
            match layer {
                Layer::Conv(c) => c.conv.init_params(&mut params, &mut rng),
                Layer::Pool => {}
                Layer::Bottleneck(b) => b.init_params(&mut params, &mut rng),
            }
        }
        params
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> Vec<FeatureMap> {
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            for layer in stage {
                h = layer.forward(params, &h);
            }
            taps.push(h.clone());
        }
        taps
    }

    pub fn forward_trace(&self, params: &[f64], x: &FeatureMap) -> BackboneTrace {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            let mut stage_caches = Vec::with_capacity(stage.len());
            for layer in stage {
                let (y, cache) = layer.forward_cached(params, &h);
                stage_caches.push(cache);
                h = y;
            }
            caches.push(stage_caches);
            taps.push(h.clone());
        }
        BackboneTrace { caches, taps }
    }

    /// Backpropagates gradients arriving at the taps into `grads`.
    pub fn backward(&self, params: &[f64], grads: &mut [f64], trace: &BackboneTrace, tap_grads: Vec<Option<FeatureMap>>) {
        assert_eq!(tap_grads.len(), self.stages.len());
        let mut carry: Option<FeatureMap> = None;
        for (s, (stage, tap_grad)) in self.stages.iter().zip(tap_grads).enumerate().rev() {
            let mut g = match (carry.take(), tap_grad) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => continue,
            };
            for (l, layer) in stage.iter().enumerate().rev() {
                let first = s == 0 && l == 0;
                match layer.backward(params, grads, &trace.caches[s][l], g, !first) {
                    Some(dx) => g = dx,
                    None => return,
                }
            }
            carry = Some(g);
        }
    }

    /// Inputs seen by every layer (flattened order) during a forward pass.
    pub fn layer_inputs(&self, params: &[f64], x: &FeatureMap) -> Vec<FeatureMap> {
        let mut inputs = Vec::new();
        let mut h = x.clone();
        for layer in self.layers() {
            inputs.push(h.clone());
            h = layer.forward(params, &h);
        }
        inputs
    }

    /// Runs layers `start..` on `x` (the input of layer `start`) and returns the final feature map.
    pub fn forward_from(&self, params: &[f64], start: usize, x: &FeatureMap) -> FeatureMap {
        self.layers().skip(start).fold(x.clone(), |h, layer| layer.forward(params, &h))
    }
}
