//! Sequential conv/ReLU/max-pool networks: forward passes that keep every
//! layer output, backward-to-input passes under a chosen ReLU rule, and the
//! deterministic toy models used as ground truth.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{
    conv2d_forward, conv2d_input_grad, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, ReluRule, Real, Switches, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `[K, C, kh, kw]`
    pub weights: Tensor<T>,
    /// `[K]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T = f32> {
    Conv(ConvParams<T>),
    Relu,
    MaxPool { size: usize, stride: usize },
}

impl<T> LayerKind<T> {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec<T = f32> {
    pub name: String,
    pub kind: LayerKind<T>,
}

impl<T> LayerSpec<T> {
    pub fn conv(name: impl Into<String>, params: ConvParams<T>) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv(params),
        }
    }

    pub fn relu(name: impl Into<String>) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Relu,
        }
    }

    pub fn maxpool(name: impl Into<String>, size: usize, stride: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::MaxPool { size, stride },
        }
    }
}

/// Per-channel `(v - mean) / std` applied to `[0, 1]` pixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn uniform(channels: usize, mean: f64, std: f64) -> Self {
        Normalization {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }

    /// Normalized values of pixel 0 and pixel 1 for channel `c`.
    pub fn range(&self, c: usize) -> (f64, f64) {
        (-self.mean[c] / self.std[c], (1.0 - self.mean[c]) / self.std[c])
    }
}

/// Identifies one kernel (output channel) of a named conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KernelRef {
    pub layer: String,
    pub index: usize,
}

impl KernelRef {
    pub fn new(layer: impl Into<String>, index: usize) -> Self {
        KernelRef {
            layer: layer.into(),
            index,
        }
    }
}

/// Where a validated [`KernelRef`] lives in the layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSite {
    pub conv_index: usize,
    /// Index of the ReLU whose output is the kernel's feature map.
    pub act_index: usize,
    pub channel: usize,
    /// Kernel count `N` at the layer.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// A frozen sequential CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<T = f32> {
    layers: Vec<LayerSpec<T>>,
    input_shape: [usize; 3],
    normalization: Normalization,
    output_shapes: Vec<[usize; 3]>,
}

impl<T: Real> NetworkSpec<T> {
    pub fn new(
        input_shape: [usize; 3],
        normalization: Normalization,
        layers: Vec<LayerSpec<T>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network has no layers".into()));
        }
        if !layers.iter().any(|l| matches!(l.kind, LayerKind::Conv(_))) {
            return Err(Error::Validation("network has no conv layer".into()));
        }
        let c = input_shape[0];
        if normalization.mean.len() != c || normalization.std.len() != c {
            return Err(Error::Validation(format!(
                "normalization has {} means and {} stds for {c} input channels",
                normalization.mean.len(),
                normalization.std.len()
            )));
        }
        if normalization.std.iter().any(|&s| !(s > 0.0) || !s.is_finite())
            || normalization.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Validation(
                "normalization stds must be positive and finite".into(),
            ));
        }
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Validation(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let output_shapes = propagate_shapes(input_shape, &layers)?;
        Ok(NetworkSpec {
            layers,
            input_shape,
            normalization,
            output_shapes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec<T>] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn output_shape(&self, index: usize) -> [usize; 3] {
        self.output_shapes[index]
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn conv_layer_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv(_)))
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Same layers, re-targeted at a different input size.
    pub fn with_input_shape(&self, input_shape: [usize; 3]) -> Result<Self> {
        Self::new(input_shape, self.normalization.clone(), self.layers.clone())
    }

    pub fn cast<U: Real>(&self) -> NetworkSpec<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerSpec {
                name: l.name.clone(),
                kind: match &l.kind {
                    LayerKind::Conv(p) => LayerKind::Conv(ConvParams {
                        weights: p.weights.cast(),
                        bias: p.bias.cast(),
                        stride: p.stride,
                        pad: p.pad,
                    }),
                    LayerKind::Relu => LayerKind::Relu,
                    LayerKind::MaxPool { size, stride } => LayerKind::MaxPool {
                        size: *size,
                        stride: *stride,
                    },
                },
            })
            .collect();
        NetworkSpec {
            layers,
            input_shape: self.input_shape,
            normalization: self.normalization.clone(),
            output_shapes: self.output_shapes.clone(),
        }
    }

    /// Resolves a kernel to its conv layer and the ReLU directly after it.
    pub fn kernel_site(&self, kernel: &KernelRef) -> Result<KernelSite> {
        let conv_index = self.layer_index(&kernel.layer)?;
        let LayerKind::Conv(p) = &self.layers[conv_index].kind else {
            return Err(Error::Layer {
                layer: kernel.layer.clone(),
                detail: format!(
                    "is a {} layer; only conv layers are selectable",
                    self.layers[conv_index].kind.tag()
                ),
            });
        };
        let act_index = conv_index + 1;
        if !matches!(self.layers.get(act_index).map(|l| &l.kind), Some(LayerKind::Relu)) {
            return Err(Error::Layer {
                layer: kernel.layer.clone(),
                detail: "is not followed by a ReLU, so it has no feature map".into(),
            });
        }
        let channels = p.weights.shape()[0];
        if kernel.index >= channels {
            return Err(Error::KernelOutOfRange {
                layer: kernel.layer.clone(),
                index: kernel.index,
                count: channels,
            });
        }
        let [_, height, width] = self.output_shapes[act_index];
        Ok(KernelSite {
            conv_index,
            act_index,
            channel: kernel.index,
            channels,
            height,
            width,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has shape {:?}, network expects {:?}",
                    x.shape(),
                    self.input_shape
                ),
            ));
        }
        Ok(())
    }

    pub fn forward_with_trace(&self, x: &Tensor<T>) -> Result<ActivationTrace<T>> {
        self.forward_through(x, self.layers.len() - 1)
    }

    /// Forward pass that stops after layer `last` (inclusive).
    pub fn forward_through(&self, x: &Tensor<T>, last: usize) -> Result<ActivationTrace<T>> {
        self.check_input(x)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(last + 1);
        let mut switches = Vec::with_capacity(last + 1);
        for layer in &self.layers[..=last] {
            let input = outputs.last().unwrap_or(x);
            let (out, sw) = match &layer.kind {
                LayerKind::Conv(p) => {
                    let y = conv2d_forward(input, &p.weights, &p.bias, p.stride, p.pad)
                        .map_err(|e| at_layer(&layer.name, e))?;
                    (y, None)
                }
                LayerKind::Relu => (relu_forward(input), None),
                LayerKind::MaxPool { size, stride } => {
                    let (y, s) = maxpool_forward(input, *size, *stride)
                        .map_err(|e| at_layer(&layer.name, e))?;
                    (y, Some(s))
                }
            };
            outputs.push(out);
            switches.push(sw);
        }
        Ok(ActivationTrace {
            names: self.layers[..=last].iter().map(|l| l.name.clone()).collect(),
            input: x.clone(),
            outputs,
            switches,
        })
    }

    /// The post-ReLU `[N, H, W]` feature maps of the named conv layer.
    pub fn feature_maps_at(&self, trace: &ActivationTrace<T>, layer: &str) -> Result<Tensor<T>> {
        let site = self.kernel_site(&KernelRef::new(layer, 0))?;
        trace
            .outputs
            .get(site.act_index)
            .cloned()
            .ok_or_else(|| Error::Layer {
                layer: layer.to_string(),
                detail: "not reached by this trace".into(),
            })
    }

    /// Back-propagates gradients seeded at layer outputs down to the input.
    /// Seeds are keyed by layer name; weights are never touched.
    pub fn input_gradient(
        &self,
        x: &Tensor<T>,
        seeds: &BTreeMap<String, Tensor<T>>,
        rule: ReluRule,
    ) -> Result<Tensor<T>> {
        let mut indexed = Vec::with_capacity(seeds.len());
        for (name, g) in seeds {
            indexed.push((self.layer_index(name)?, g.clone()));
        }
        let Some(deepest) = indexed.iter().map(|(i, _)| *i).max() else {
            return Ok(Tensor::zeros(x.shape()));
        };
        let trace = self.forward_through(x, deepest)?;
        self.backward(&trace, indexed, rule)
    }

    /// Backward pass over an existing trace. `seeds` are `(layer index,
    /// gradient w.r.t. that layer's output)`; duplicates are summed.
    pub fn backward(
        &self,
        trace: &ActivationTrace<T>,
        seeds: Vec<(usize, Tensor<T>)>,
        rule: ReluRule,
    ) -> Result<Tensor<T>> {
        let mut pending: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        for (idx, g) in seeds {
            if idx >= trace.outputs.len() {
                return Err(Error::Layer {
                    layer: self.layers.get(idx).map_or_else(|| idx.to_string(), |l| l.name.clone()),
                    detail: "seeded beyond the end of the trace".into(),
                });
            }
            if g.shape() != trace.outputs[idx].shape() {
                return Err(Error::shape(
                    "input_gradient",
                    format!(
                        "seed for `{}` has shape {:?}, layer output is {:?}",
                        self.layers[idx].name,
                        g.shape(),
                        trace.outputs[idx].shape()
                    ),
                ));
            }
            match pending.get_mut(&idx) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    pending.insert(idx, g);
                }
            }
        }
        let Some((&top, _)) = pending.iter().next_back() else {
            return Ok(Tensor::zeros(trace.input.shape()));
        };
        let mut grad = pending.remove(&top).expect("top seed present");
        for idx in (0..=top).rev() {
            let layer = &self.layers[idx];
            let input = trace.layer_input(idx);
            grad = match &layer.kind {
                LayerKind::Conv(p) => {
                    conv2d_input_grad(&grad, &p.weights, p.stride, p.pad, input.shape())
                }
                LayerKind::Relu => relu_backward(&grad, input, rule),
                LayerKind::MaxPool { .. } => maxpool_backward(
                    &grad,
                    trace.switches[idx].as_ref().expect("pool layer records switches"),
                    input.shape(),
                ),
            }
            .map_err(|e| at_layer(&layer.name, e))?;
            if idx > 0 {
                if let Some(extra) = pending.remove(&(idx - 1)) {
                    grad.add_assign(&extra)?;
                }
            }
        }
        Ok(grad)
    }

    /// Valid normalized range `[(0-mean)/std, (1-mean)/std]` per input channel.
    pub fn input_range(&self) -> Vec<(f64, f64)> {
        (0..self.input_shape[0]).map(|c| self.normalization.range(c)).collect()
    }
}

fn at_layer(layer: &str, e: Error) -> Error {
    Error::Layer {
        layer: layer.to_string(),
        detail: e.to_string(),
    }
}

fn propagate_shapes<T: Real>(input: [usize; 3], layers: &[LayerSpec<T>]) -> Result<Vec<[usize; 3]>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let [mut c, mut h, mut w] = input;
    for l in layers {
        let err = |detail: String| Error::Layer {
            layer: l.name.clone(),
            detail,
        };
        match &l.kind {
            LayerKind::Conv(p) => {
                let [k, wc, kh, kw] = match p.weights.shape()[..] {
                    [a, b, c, d] => [a, b, c, d],
                    _ => return Err(err(format!("weights must be rank 4, got {:?}", p.weights.shape()))),
                };
                if p.bias.shape() != [k] {
                    return Err(err(format!("bias shape {:?} for {k} kernels", p.bias.shape())));
                }
                if wc != c {
                    return Err(err(format!("expects {wc} input channels, receives {c}")));
                }
                if p.stride == 0 {
                    return Err(err("stride must be positive".into()));
                }
                if h + 2 * p.pad < kh || w + 2 * p.pad < kw {
                    return Err(err(format!("kernel {kh}x{kw} exceeds padded input {h}x{w}")));
                }
                h = (h + 2 * p.pad - kh) / p.stride + 1;
                w = (w + 2 * p.pad - kw) / p.stride + 1;
                c = k;
            }
            LayerKind::Relu => {}
            LayerKind::MaxPool { size, stride } => {
                if *size == 0 || *stride == 0 {
                    return Err(err("pool window and stride must be positive".into()));
                }
                if h < *size || w < *size {
                    return Err(err(format!("pool window {size} exceeds input {h}x{w}")));
                }
                h = (h - size) / stride + 1;
                w = (w - size) / stride + 1;
            }
        }
        shapes.push([c, h, w]);
    }
    Ok(shapes)
}

/// Every layer output of one forward pass, plus pooling switches.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T = f32> {
    names: Vec<String>,
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    switches: Vec<Option<Switches>>,
}

impl<T: Real> ActivationTrace<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.outputs[i])
    }

    pub fn output_at(&self, index: usize) -> &Tensor<T> {
        &self.outputs[index]
    }

    pub fn layer_input(&self, index: usize) -> &Tensor<T> {
        if index == 0 {
            &self.input
        } else {
            &self.outputs[index - 1]
        }
    }

    pub fn switches_at(&self, index: usize) -> Option<&Switches> {
        self.switches.get(index).and_then(Option::as_ref)
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    /// Final network output (last traced layer).
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("trace has at least one layer")
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.outputs)
    }
}

/// Names of the handcrafted 1×1 kernels in [`build_toy_color_net`], in channel order.
pub const COLOR_DETECTORS: [&str; 6] = ["red", "green", "blue", "blue_red", "blue_green", "blue_yellow"];

/// RGB weights of [`COLOR_DETECTORS`]. The mixtures are blue-opponent, so
/// the green detector is the only kernel that responds to pure green.
pub const COLOR_DETECTOR_WEIGHTS: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 1.0],
    [0.0, -1.0, 1.0],
    [-0.5, -0.5, 1.0],
];

/// Color-selective toy network on 64×64 RGB input with identity normalization.
///
/// Layer `color` holds six 1×1 zero-bias kernels, one per
/// [`COLOR_DETECTORS`] entry, so a kernel fires exactly where its weighted
/// color sum is positive. A seeded 3×3 conv + ReLU + max-pool block follows.
pub fn build_toy_color_net() -> NetworkSpec<f32> {
    let color_w: Vec<f32> = COLOR_DETECTOR_WEIGHTS.iter().flatten().copied().collect();
    let mut rng = SplitMix64::new(0xC0102);
    let block_w: Vec<f32> = (0..8 * 6 * 9)
        .map(|_| (rng.next_signed() * (3.0 * 2.0 / 54.0f64).sqrt()) as f32)
        .collect();
    let layers = vec![
        LayerSpec::conv(
            "color",
            ConvParams {
                weights: Tensor::new(vec![6, 3, 1, 1], color_w).expect("static shape"),
                bias: Tensor::zeros(&[6]),
                stride: 1,
                pad: 0,
            },
        ),
        LayerSpec::relu("color_relu"),
        LayerSpec::conv(
            "block_conv",
            ConvParams {
                weights: Tensor::new(vec![8, 6, 3, 3], block_w).expect("static shape"),
                bias: Tensor::zeros(&[8]),
                stride: 1,
                pad: 1,
            },
        ),
        LayerSpec::relu("block_relu"),
        LayerSpec::maxpool("block_pool", 2, 2),
    ];
    NetworkSpec::new([3, 64, 64], Normalization::identity(3), layers).expect("toy color net is valid")
}

/// Input size of [`build_toy_deep_net`].
pub const TOY_DEEP_INPUT: [usize; 3] = [3, 64, 64];

/// Three VGG-style blocks (conv3×3, ReLU, conv3×3, ReLU, maxpool2) with
/// widths 8/16/16 and zero bias. Layer names follow VGG: `conv1_1`,
/// `relu1_1`, `conv1_2`, `relu1_2`, `pool1`, ... `pool3`.
///
/// Weights are uniform draws from [`SplitMix64`] seeded with `seed`. Each
/// conv is then rescaled so that its output has unit standard deviation on a
/// fixed calibration input (uniform noise with unit variance, drawn from the
/// same generator after the weights), which keeps every layer's activations
/// in a usable range regardless of seed.
pub fn build_toy_deep_net(seed: u64) -> NetworkSpec<f32> {
    let widths = [(3usize, 8usize), (8, 16), (16, 16)];
    let mut rng = SplitMix64::new(seed);
    let mut raw: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    for (b, &(cin, cout)) in widths.iter().enumerate() {
        for (j, (i, o)) in [(cin, cout), (cout, cout)].into_iter().enumerate() {
            let w: Vec<f64> = (0..o * i * 9).map(|_| rng.next_signed()).collect();
            raw.push((format!("conv{}_{}", b + 1, j + 1), i, o, w));
        }
    }
    let [c, h, w] = TOY_DEEP_INPUT;
    let calib: Vec<f64> = (0..c * h * w).map(|_| rng.next_signed() * 3f64.sqrt()).collect();
    let mut act = Tensor::<f64>::new(vec![c, h, w], calib).expect("static shape");

    let mut layers = Vec::new();
    for (n, (name, cin, cout, mut wts)) in raw.into_iter().enumerate() {
        let bias = Tensor::<f64>::zeros(&[cout]);
        let weights = Tensor::new(vec![cout, cin, 3, 3], wts.clone()).expect("static shape");
        let y = conv2d_forward(&act, &weights, &bias, 1, 1).expect("calibration shapes");
        let std = population_std(y.data());
        for v in &mut wts {
            *v /= std;
        }
        let weights = Tensor::new(vec![cout, cin, 3, 3], wts).expect("static shape");
        act = relu_forward(&y.scale(1.0 / std));
        let suffix = &name[4..];
        layers.push(LayerSpec::conv(
            name.clone(),
            ConvParams {
                weights: weights.cast::<f32>(),
                bias: Tensor::zeros(&[cout]),
                stride: 1,
                pad: 1,
            },
        ));
        layers.push(LayerSpec::relu(format!("relu{suffix}")));
        if n % 2 == 1 {
            let block = n / 2 + 1;
            layers.push(LayerSpec::maxpool(format!("pool{block}"), 2, 2));
            act = maxpool_forward(&act, 2, 2).expect("calibration shapes").0;
        }
    }
    NetworkSpec::new(TOY_DEEP_INPUT, Normalization::uniform(3, 0.5, 0.25), layers)
        .expect("toy deep net is valid")
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}
