//! Convolutional regressor for the per-superpixel unary term.
//!
//! The network is a stack of convolution, rectifier and max-pool blocks
//! followed by fully connected layers, the last of which is linear and has a
//! single output. Everything is computed in `f64`; checkpoints store `f32`.

mod sgd;

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::seed::rng_for;
use crate::superpixels::Patch;

pub use sgd::{learning_rate, sgd_step, TrainHyper, Velocity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    /// Odd kernel side; padding is `kernel / 2`.
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool window and stride; 1 disables pooling.
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub conv: Vec<ConvSpec>,
    /// Widths of the fully connected layers; the last must be 1.
    pub fc: Vec<usize>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let c = |out_channels, pool| ConvSpec { out_channels, kernel: 3, stride: 1, pool };
        Self {
            input_size: 64,
            input_channels: 3,
            conv: vec![c(16, 2), c(32, 2), c(32, 2), c(64, 2), c(64, 1)],
            fc: vec![256, 128, 64, 1],
        }
    }
}

/// Resolved geometry of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Conv { in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, in_n: usize, out_n: usize, pool: usize, pooled_n: usize },
    Fc { inputs: usize, outputs: usize, relu: bool },
}

impl Shape {
    fn weight_len(&self) -> usize {
        match *self {
            Shape::Conv { in_c, out_c, k, .. } => out_c * in_c * k * k,
            Shape::Fc { inputs, outputs, .. } => inputs * outputs,
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            Shape::Conv { out_c, .. } => out_c,
            Shape::Fc { outputs, .. } => outputs,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Shape::Conv { in_c, k, .. } => in_c * k * k,
            Shape::Fc { inputs, .. } => inputs,
        }
    }

    fn output_len(&self) -> usize {
        match *self {
            Shape::Conv { out_c, pooled_n, .. } => out_c * pooled_n * pooled_n,
            Shape::Fc { outputs, .. } => outputs,
        }
    }
}

impl NetworkSpec {
    fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input_size < 1 || self.input_channels < 1 {
            return Err(param("network input must be at least 1x1x1"));
        }
        if self.conv.is_empty() || self.fc.is_empty() {
            return Err(param("network needs at least one conv and one fc layer"));
        }
        if self.fc.last() != Some(&1) {
            return Err(param("last fc layer must have width 1"));
        }
        let mut shapes = Vec::new();
        let (mut c, mut n) = (self.input_channels, self.input_size);
        for (i, l) in self.conv.iter().enumerate() {
            if l.out_channels < 1 || l.kernel % 2 == 0 || l.stride < 1 || l.pool < 1 {
                return Err(param(format!("conv layer {i}: channels >= 1, odd kernel, stride >= 1, pool >= 1 required")));
            }
            let pad = l.kernel / 2;
            let out_n = (n + 2 * pad - l.kernel) / l.stride + 1;
            let pooled_n = out_n / l.pool;
            if pooled_n < 1 {
                return Err(param(format!("conv layer {i} reduces the feature map to nothing")));
            }
            shapes.push(Shape::Conv { in_c: c, out_c: l.out_channels, k: l.kernel, stride: l.stride, pad, in_n: n, out_n, pool: l.pool, pooled_n });
            c = l.out_channels;
            n = pooled_n;
        }
        let mut inputs = c * n * n;
        for (i, &width) in self.fc.iter().enumerate() {
            if width < 1 {
                return Err(param(format!("fc layer {i} must have width >= 1")));
            }
            shapes.push(Shape::Fc { inputs, outputs: width, relu: i + 1 < self.fc.len() });
            inputs = width;
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn layer_count(&self) -> usize {
        self.conv.len() + self.fc.len()
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_size * self.input_size
    }
}

/// Parameters of one layer. Conv weights are `[out][in][ky][kx]`, fc weights
/// `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainablePattern {
    All,
    FcOnly,
}

/// Network parameters. Every mutation bumps a generation counter so stale
/// forward caches are detected.
#[derive(Debug, Clone)]
pub struct NetworkWeights {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    layers: Vec<LayerParams>,
    generation: u64,
}

impl PartialEq for NetworkWeights {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(p: &LayerParams) -> Self {
        Self { weights: vec![0.0; p.weights.len()], bias: vec![0.0; p.bias.len()] }
    }

    pub fn add_scaled(&mut self, other: &LayerGrad, s: f64) {
        self.weights.iter_mut().zip(&other.weights).for_each(|(a, b)| *a += s * b);
        self.bias.iter_mut().zip(&other.bias).for_each(|(a, b)| *a += s * b);
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Per-layer gradients; `None` for frozen layers.
pub type Gradients = Vec<Option<LayerGrad>>;

/// Adds `s * src` into `acc`, allocating where `acc` has no entry yet.
pub fn accumulate(acc: &mut Gradients, src: &Gradients, s: f64) {
    if acc.len() < src.len() {
        acc.resize(src.len(), None);
    }
    for (a, b) in acc.iter_mut().zip(src) {
        if let Some(b) = b {
            match a {
                Some(a) => a.add_scaled(b, s),
                None => {
                    let mut g = b.clone();
                    g.scale(s);
                    *a = Some(g);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv { input: Vec<f64>, pre: Vec<f64>, argmax: Vec<usize> },
    Fc { input: Vec<f64>, pre: Vec<f64> },
}

/// Activations recorded by a forward pass, starting at layer `start`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    start: usize,
    layers: Vec<LayerCache>,
}

impl NetworkWeights {
    /// He-uniform initialization from `seed`; biases start at zero.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = rng_for(&[seed, i as u64, 0x1E17]);
                let bound = (6.0 / s.fan_in() as f64).sqrt();
                LayerParams {
                    weights: (0..s.weight_len()).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: vec![0.0; s.bias_len()],
                    trainable: true,
                }
            })
            .collect();
        Ok(Self { spec: spec.clone(), shapes, layers, generation: 0 })
    }

    /// Builds weights from explicit per-layer parameters.
    pub fn from_layers(spec: &NetworkSpec, layers: Vec<LayerParams>) -> Result<Self> {
        let shapes = spec.shapes()?;
        if layers.len() != shapes.len() {
            return Err(Error::Shape(format!("{} layers for a {}-layer network", layers.len(), shapes.len())));
        }
        for (i, (l, s)) in layers.iter().zip(&shapes).enumerate() {
            if l.weights.len() != s.weight_len() || l.bias.len() != s.bias_len() {
                return Err(Error::Shape(format!("layer {i} parameter sizes do not match the spec")));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(Self { spec: spec.clone(), shapes, layers, generation: 0 })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Mutable access to one layer; invalidates existing caches.
    pub fn layer_mut(&mut self, i: usize) -> &mut LayerParams {
        self.generation += 1;
        &mut self.layers[i]
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn conv_layer_count(&self) -> usize {
        self.spec.conv.len()
    }

    pub fn set_trainable(&mut self, pattern: TrainablePattern) {
        let n_conv = self.conv_layer_count();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.trainable = match pattern {
                TrainablePattern::All => true,
                TrainablePattern::FcOnly => i >= n_conv,
            };
        }
        self.generation += 1;
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().filter(|l| l.trainable).count()
    }

    /// Sum of squared parameters over trainable layers.
    pub fn trainable_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .filter(|l| l.trainable)
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|v| v * v)
            .sum()
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
        self.generation += 1;
    }

    /// Order-sensitive checksum of the convolutional parameters.
    pub fn conv_checksum(&self) -> u64 {
        let bits = self.layers[..self.conv_layer_count()]
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|v| v.to_bits());
        let parts: Vec<u64> = bits.collect();
        crate::seed::mix(&parts)
    }

    pub(crate) fn apply_update(&mut self, f: impl FnOnce(&mut [LayerParams])) {
        f(&mut self.layers);
        self.generation += 1;
    }

    fn check_input(&self, len: usize, start: usize) -> Result<()> {
        let expected = if start == 0 { self.spec.input_len() } else { self.shapes[start - 1].output_len() };
        if len != expected {
            return Err(Error::Shape(format!("network input has {len} values, expected {expected}")));
        }
        Ok(())
    }

    /// Output of the convolutional stack, the input of the first fc layer.
    pub fn conv_features(&self, patch: &Patch) -> Result<Vec<f64>> {
        let x: Vec<f64> = patch.data.iter().map(|&v| v as f64).collect();
        self.check_input(x.len(), 0)?;
        let mut x = x;
        for i in 0..self.conv_layer_count() {
            x = self.layer_forward(i, x, None);
        }
        Ok(x)
    }

    /// Unary output for one patch with the activation cache for `backward`.
    pub fn forward(&self, patch: &Patch) -> Result<(f64, ForwardCache)> {
        let x: Vec<f64> = patch.data.iter().map(|&v| v as f64).collect();
        self.forward_from(0, x)
    }

    /// Runs layers `start..` on `input`, the output of layer `start - 1`.
    pub fn forward_from(&self, start: usize, input: Vec<f64>) -> Result<(f64, ForwardCache)> {
        if start >= self.layers.len() {
            return Err(param(format!("start layer {start} out of range")));
        }
        self.check_input(input.len(), start)?;
        let mut layers = Vec::with_capacity(self.layers.len() - start);
        let mut x = input;
        for i in start..self.layers.len() {
            x = self.layer_forward(i, x, Some(&mut layers));
        }
        let h = x[0];
        if !h.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok((h, ForwardCache { generation: self.generation, start, layers }))
    }

    /// Output for one patch without recording a cache.
    pub fn predict(&self, patch: &Patch) -> Result<f64> {
        Ok(self.forward(patch)?.0)
    }

    fn layer_forward(&self, i: usize, x: Vec<f64>, cache: Option<&mut Vec<LayerCache>>) -> Vec<f64> {
        let p = &self.layers[i];
        match self.shapes[i] {
            Shape::Conv { in_c, out_c, k, stride, pad, in_n, out_n, pool, pooled_n } => {
                let mut pre = vec![0.0; out_c * out_n * out_n];
                for oc in 0..out_c {
                    for oy in 0..out_n {
                        for ox in 0..out_n {
                            let mut s = p.bias[oc];
                            for ic in 0..in_c {
                                let wbase = (oc * in_c + ic) * k * k;
                                let xbase = ic * in_n * in_n;
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= in_n as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= in_n as isize {
                                            continue;
                                        }
                                        s += p.weights[wbase + ky * k + kx] * x[xbase + iy as usize * in_n + ix as usize];
                                    }
                                }
                            }
                            pre[(oc * out_n + oy) * out_n + ox] = s;
                        }
                    }
                }
                let mut out = vec![0.0; out_c * pooled_n * pooled_n];
                let mut argmax = vec![0; out.len()];
                for oc in 0..out_c {
                    for py in 0..pooled_n {
                        for px in 0..pooled_n {
                            let (mut best, mut best_i) = (f64::NEG_INFINITY, 0);
                            for dy in 0..pool {
                                for dx in 0..pool {
                                    let j = (oc * out_n + py * pool + dy) * out_n + px * pool + dx;
                                    let a = pre[j].max(0.0);
                                    if a > best {
                                        best = a;
                                        best_i = j;
                                    }
                                }
                            }
                            let o = (oc * pooled_n + py) * pooled_n + px;
                            out[o] = best;
                            argmax[o] = best_i;
                        }
                    }
                }
                if let Some(c) = cache {
                    c.push(LayerCache::Conv { input: x, pre, argmax });
                }
                out
            }
            Shape::Fc { inputs, outputs, relu } => {
                let pre: Vec<f64> = (0..outputs)
                    .map(|o| p.bias[o] + p.weights[o * inputs..(o + 1) * inputs].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>())
                    .collect();
                let out = if relu { pre.iter().map(|v| v.max(0.0)).collect() } else { pre.clone() };
                if let Some(c) = cache {
                    c.push(LayerCache::Fc { input: x, pre });
                }
                out
            }
        }
    }

    /// Gradients of the output with respect to every trainable parameter,
    /// scaled by `upstream`. Frozen layers get `None`.
    pub fn backward(&self, cache: &ForwardCache, upstream: f64) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::Contract("forward cache is stale: weights changed since the forward pass".into()));
        }
        let mut grads: Gradients = vec![None; self.layers.len()];
        let first_trainable = match (cache.start..self.layers.len()).find(|&i| self.layers[i].trainable) {
            Some(i) => i,
            None => return Ok(grads),
        };
        let mut g = vec![upstream];
        for i in (first_trainable..self.layers.len()).rev() {
            let p = &self.layers[i];
            let need_input_grad = i > first_trainable;
            let mut lg = LayerGrad::zeros_like(p);
            let lc = &cache.layers[i - cache.start];
            g = match (self.shapes[i], lc) {
                (Shape::Fc { inputs, outputs, relu }, LayerCache::Fc { input, pre }) => {
                    let gz: Vec<f64> = (0..outputs).map(|o| if !relu || pre[o] > 0.0 { g[o] } else { 0.0 }).collect();
                    for o in 0..outputs {
                        lg.bias[o] = gz[o];
                        for (w, x) in lg.weights[o * inputs..(o + 1) * inputs].iter_mut().zip(input) {
                            *w = gz[o] * x;
                        }
                    }
                    if need_input_grad {
                        let mut gx = vec![0.0; inputs];
                        for o in 0..outputs {
                            for (gxi, w) in gx.iter_mut().zip(&p.weights[o * inputs..(o + 1) * inputs]) {
                                *gxi += gz[o] * w;
                            }
                        }
                        gx
                    } else {
                        Vec::new()
                    }
                }
                (Shape::Conv { in_c, out_c, k, stride, pad, in_n, out_n, .. }, LayerCache::Conv { input, pre, argmax }) => {
                    let mut gz = vec![0.0; pre.len()];
                    for (o, &j) in argmax.iter().enumerate() {
                        if pre[j] > 0.0 {
                            gz[j] += g[o];
                        }
                    }
                    let mut gx = if need_input_grad { vec![0.0; input.len()] } else { Vec::new() };
                    for oc in 0..out_c {
                        for oy in 0..out_n {
                            for ox in 0..out_n {
                                let d = gz[(oc * out_n + oy) * out_n + ox];
                                if d == 0.0 {
                                    continue;
                                }
                                lg.bias[oc] += d;
                                for ic in 0..in_c {
                                    let wbase = (oc * in_c + ic) * k * k;
                                    let xbase = ic * in_n * in_n;
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= in_n as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= in_n as isize {
                                                continue;
                                            }
                                            let xi = xbase + iy as usize * in_n + ix as usize;
                                            lg.weights[wbase + ky * k + kx] += d * input[xi];
                                            if need_input_grad {
                                                gx[xi] += d * p.weights[wbase + ky * k + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    gx
                }
                _ => return Err(Error::Internal("cache layout does not match the network".into())),
            };
            if p.trainable {
                grads[i] = Some(lg);
            }
        }
        Ok(grads)
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_exact(r)?) as usize)
}

/// Largest layer count or width accepted when reading, to reject garbage
/// before allocating.
const MAX_DIM: usize = 1 << 16;

impl NetworkSpec {
    pub(crate) fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_u32(w, self.input_size)?;
        write_u32(w, self.input_channels)?;
        write_u32(w, self.conv.len())?;
        for c in &self.conv {
            for v in [c.out_channels, c.kernel, c.stride, c.pool] {
                write_u32(w, v)?;
            }
        }
        write_u32(w, self.fc.len())?;
        for &f in &self.fc {
            write_u32(w, f)?;
        }
        Ok(())
    }

    pub(crate) fn read_from(r: &mut impl Read) -> Result<Self> {
        let bounded = |v: usize| if v <= MAX_DIM { Ok(v) } else { Err(Error::Format(format!("implausible network dimension {v}"))) };
        let input_size = bounded(read_u32(r)?)?;
        let input_channels = bounded(read_u32(r)?)?;
        let n_conv = bounded(read_u32(r)?)?;
        let mut conv = Vec::with_capacity(n_conv);
        for _ in 0..n_conv {
            conv.push(ConvSpec {
                out_channels: bounded(read_u32(r)?)?,
                kernel: bounded(read_u32(r)?)?,
                stride: bounded(read_u32(r)?)?,
                pool: bounded(read_u32(r)?)?,
            });
        }
        let n_fc = bounded(read_u32(r)?)?;
        let fc = (0..n_fc).map(|_| bounded(read_u32(r)?)).collect::<Result<Vec<_>>>()?;
        let spec = Self { input_size, input_channels, conv, fc };
        spec.validate().map_err(|e| Error::Format(format!("invalid network spec: {e}")))?;
        Ok(spec)
    }
}

impl NetworkWeights {
    /// Spec, trainable flags, then every layer's weights and biases as
    /// little-endian `f32`.
    pub(crate) fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.spec.write_to(w)?;
        for l in &self.layers {
            w.write_all(&[u8::from(l.trainable)])?;
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub(crate) fn read_from(r: &mut impl Read) -> Result<Self> {
        let spec = NetworkSpec::read_from(r)?;
        let shapes = spec.shapes()?;
        let mut flags = Vec::with_capacity(shapes.len());
        for _ in 0..shapes.len() {
            flags.push(match read_exact::<1>(r)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("invalid trainable flag {b}"))),
            });
        }
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| Ok(f32::from_le_bytes(read_exact(r)?) as f64)).collect()
        };
        let mut layers = Vec::with_capacity(shapes.len());
        for (s, trainable) in shapes.iter().zip(flags) {
            let weights = read_vec(s.weight_len())?;
            let bias = read_vec(s.bias_len())?;
            layers.push(LayerParams { weights, bias, trainable });
        }
        Self::from_layers(&spec, layers).map_err(|e| Error::Format(format!("invalid weights: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_size: 6,
            input_channels: 3,
            conv: vec![
                ConvSpec { out_channels: 2, kernel: 3, stride: 1, pool: 2 },
                ConvSpec { out_channels: 3, kernel: 3, stride: 1, pool: 1 },
            ],
            fc: vec![4, 1],
        }
    }

    fn patch(size: usize, seed: u64) -> Patch {
        let mut rng = rng_for(&[seed, 99]);
        Patch { size, data: (0..3 * size * size).map(|_| rng.random::<f32>()).collect() }
    }

    /// Nudges biases positive so most rectifiers are active and no
    /// finite-difference step crosses a kink.
    fn test_weights(spec: &NetworkSpec, seed: u64) -> NetworkWeights {
        let mut w = NetworkWeights::init(spec, seed).unwrap();
        for i in 0..w.layers().len() {
            let l = w.layer_mut(i);
            l.bias.iter_mut().enumerate().for_each(|(j, b)| *b = 0.1 + 0.05 * j as f64);
        }
        w
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = tiny_spec();
        let mut w = NetworkWeights::init(&spec, 1).unwrap();
        for i in 0..w.layers().len() {
            let l = w.layer_mut(i);
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        assert_eq!(w.predict(&patch(6, 1)).unwrap(), 0.0);
    }

    #[test]
    fn last_layer_is_linear() {
        let spec = tiny_spec();
        let mut w = test_weights(&spec, 2);
        let last = w.layers().len() - 1;
        w.layer_mut(last).bias[0] = 0.0;
        let p = patch(6, 2);
        let h = w.predict(&p).unwrap();
        w.layer_mut(last).weights.iter_mut().for_each(|v| *v *= 2.0);
        assert_eq!(w.predict(&p).unwrap(), 2.0 * h);
        assert_eq!(w.predict(&p).unwrap(), w.predict(&p).unwrap());
    }

    #[test]
    fn input_shape_is_checked() {
        let w = NetworkWeights::init(&tiny_spec(), 3).unwrap();
        assert!(matches!(w.forward(&patch(5, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = tiny_spec();
        let w = test_weights(&spec, 4);
        let p = patch(6, 4);
        let (_, cache) = w.forward(&p).unwrap();
        let upstream = 0.7;
        let grads = w.backward(&cache, upstream).unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        for (li, g) in grads.iter().enumerate() {
            let g = g.as_ref().unwrap();
            let n_w = w.layers()[li].weights.len();
            for j in 0..n_w + w.layers()[li].bias.len() {
                let perturbed = |delta: f64| {
                    let mut w2 = w.clone();
                    let l = w2.layer_mut(li);
                    if j < n_w {
                        l.weights[j] += delta;
                    } else {
                        l.bias[j - n_w] += delta;
                    }
                    w2.predict(&p).unwrap()
                };
                let fd = upstream * (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
                let an = if j < n_w { g.weights[j] } else { g.bias[j - n_w] };
                let scale = fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() / scale < 1e-4, "layer {li} param {j}: fd {fd} vs {an}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        let spec = NetworkSpec {
            input_size: 7,
            input_channels: 3,
            conv: vec![ConvSpec { out_channels: 2, kernel: 3, stride: 2, pool: 1 }],
            fc: vec![3, 1],
        };
        let w = test_weights(&spec, 5);
        let p = patch(7, 5);
        let (_, cache) = w.forward(&p).unwrap();
        let grads = w.backward(&cache, 1.0).unwrap();
        let g0 = grads[0].as_ref().unwrap();
        for j in 0..w.layers()[0].weights.len() {
            let f = |d: f64| {
                let mut w2 = w.clone();
                w2.layer_mut(0).weights[j] += d;
                w2.predict(&p).unwrap()
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - g0.weights[j]).abs() / fd.abs().max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let w = test_weights(&tiny_spec(), 6);
        let (_, cache) = w.forward(&patch(6, 6)).unwrap();
        for g in w.backward(&cache, 0.0).unwrap().into_iter().flatten() {
            assert!(g.weights.iter().chain(&g.bias).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn frozen_layers_get_no_gradient() {
        let mut w = test_weights(&tiny_spec(), 7);
        w.set_trainable(TrainablePattern::FcOnly);
        let (_, cache) = w.forward(&patch(6, 7)).unwrap();
        let grads = w.backward(&cache, 1.0).unwrap();
        assert!(grads[0].is_none() && grads[1].is_none());
        assert!(grads[2].is_some() && grads[3].is_some());
    }

    #[test]
    fn fc_only_on_default_spec_leaves_four_trainable_layers() {
        let mut w = NetworkWeights::init(&NetworkSpec::default(), 0).unwrap();
        assert_eq!(w.trainable_count(), 9);
        w.set_trainable(TrainablePattern::FcOnly);
        assert_eq!(w.trainable_count(), 4);
        w.set_trainable(TrainablePattern::All);
        assert_eq!(w.trainable_count(), 9);
    }

    #[test]
    fn stale_cache_is_a_contract_error() {
        let mut w = test_weights(&tiny_spec(), 8);
        let (_, cache) = w.forward(&patch(6, 8)).unwrap();
        w.layer_mut(0).weights[0] += 1.0;
        assert!(matches!(w.backward(&cache, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn cached_features_reproduce_full_forward() {
        let w = test_weights(&tiny_spec(), 9);
        let p = patch(6, 9);
        let (h, _) = w.forward(&p).unwrap();
        let feats = w.conv_features(&p).unwrap();
        let (h2, _) = w.forward_from(w.conv_layer_count(), feats).unwrap();
        assert_eq!(h, h2);
        let mut frozen = w.clone();
        frozen.set_trainable(TrainablePattern::FcOnly);
        let (_, full) = frozen.forward(&p).unwrap();
        let (_, partial) = frozen.forward_from(2, frozen.conv_features(&p).unwrap()).unwrap();
        assert_eq!(frozen.backward(&full, 1.3).unwrap(), frozen.backward(&partial, 1.3).unwrap());
    }

    #[test]
    fn weights_round_trip_through_bytes() {
        let mut w = test_weights(&tiny_spec(), 10);
        w.set_trainable(TrainablePattern::FcOnly);
        w.round_to_f32();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        let back = NetworkWeights::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, w);
        assert!(NetworkWeights::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = tiny_spec();
        s.fc = vec![4, 2];
        assert!(NetworkWeights::init(&s, 0).is_err());
        let mut s = tiny_spec();
        s.conv[0].kernel = 2;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.conv[1].pool = 8;
        assert!(s.validate().is_err());
    }
}
