//! Backpropagation baselines: Deconv, guided backprop and ε-rule LRP.
//!
//! Every method seeds the selected kernel's whole post-ReLU feature map and
//! carries it back to the input. The resulting map is then rescaled into the
//! valid input range and re-fed so it can be scored like an optimized input.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{ActivationTrace, KernelRef, KernelSite, LayerKind, NetworkSpec};
use crate::tensor::{conv2d_forward, conv2d_input_grad, maxpool_backward, ReluRule, Real, Tensor};

pub const DEFAULT_LRP_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    Deconv,
    Gbp,
    Lrp { epsilon: f64 },
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Deconv => "deconv",
            BaselineKind::Gbp => "gbp",
            BaselineKind::Lrp { .. } => "lrp",
        }
    }

    pub fn all() -> [BaselineKind; 3] {
        [
            BaselineKind::Deconv,
            BaselineKind::Gbp,
            BaselineKind::Lrp {
                epsilon: DEFAULT_LRP_EPSILON,
            },
        ]
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deconv" => Ok(BaselineKind::Deconv),
            "gbp" => Ok(BaselineKind::Gbp),
            "lrp" => Ok(BaselineKind::Lrp {
                epsilon: DEFAULT_LRP_EPSILON,
            }),
            other => Err(Error::Config(format!(
                "unknown baseline `{other}` (expected deconv, gbp or lrp)"
            ))),
        }
    }
}

/// How a backpropagated map becomes a network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Rescale {
    /// Global min/max onto pixel values [0, 1], then per-channel normalization.
    #[default]
    MinMax,
    /// Feed the map as is.
    None,
}

impl FromStr for Rescale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Rescale::MinMax),
            "none" => Ok(Rescale::None),
            other => Err(Error::Config(format!("unknown rescale mode `{other}`"))),
        }
    }
}

/// Input-space map produced by a baseline.
#[derive(Debug, Clone)]
pub struct Attribution<T: Real = f32> {
    pub map: Tensor<T>,
    /// The selected kernel never fired on this input, so the map is zero.
    pub dead_kernel: bool,
    /// LRP only: total relevance entering each layer from above, starting
    /// with the seed at the kernel's ReLU and ending at the network input.
    pub relevance_sums: Vec<(String, f64)>,
}

struct Seed<T: Real> {
    site: KernelSite,
    trace: ActivationTrace<T>,
    map: Tensor<T>,
    dead: bool,
}

fn seed<T: Real>(net: &NetworkSpec<T>, x: &Tensor<T>, kernel: &KernelRef) -> Result<Seed<T>> {
    let site = net.kernel_site(kernel)?;
    let trace = net.forward_through(x, site.act_index)?;
    let maps = trace.output_at(site.act_index);
    let plane = site.height * site.width;
    let mut map = Tensor::zeros(maps.shape());
    let range = site.channel * plane..(site.channel + 1) * plane;
    map.data_mut()[range.clone()].copy_from_slice(&maps.data()[range]);
    let dead = map.data().iter().all(|v| *v == T::zero());
    if dead {
        log::warn!("kernel {}#{} is inactive on this input; baseline map is zero", kernel.layer, kernel.index);
    }
    Ok(Seed { site, trace, map, dead })
}

fn guided<T: Real>(net: &NetworkSpec<T>, x: &Tensor<T>, kernel: &KernelRef, rule: ReluRule) -> Result<Attribution<T>> {
    let s = seed(net, x, kernel)?;
    let map = net.backward(&s.trace, vec![(s.site.act_index, s.map)], rule)?;
    Ok(Attribution {
        map,
        dead_kernel: s.dead,
        relevance_sums: Vec::new(),
    })
}

pub fn deconv_map<T: Real>(net: &NetworkSpec<T>, x: &Tensor<T>, kernel: &KernelRef) -> Result<Attribution<T>> {
    guided(net, x, kernel, ReluRule::Deconv)
}

pub fn gbp_map<T: Real>(net: &NetworkSpec<T>, x: &Tensor<T>, kernel: &KernelRef) -> Result<Attribution<T>> {
    guided(net, x, kernel, ReluRule::Guided)
}

/// ε-rule relevance propagation. Bias is left in the denominator, so
/// relevance is only conserved exactly on bias-free networks.
pub fn lrp_map<T: Real>(
    net: &NetworkSpec<T>,
    x: &Tensor<T>,
    kernel: &KernelRef,
    epsilon: f64,
) -> Result<Attribution<T>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("LRP epsilon must be positive, got {epsilon}")));
    }
    let s = seed(net, x, kernel)?;
    let layers = net.layers();
    let mut relevance = s.map;
    let mut sums = vec![(layers[s.site.act_index].name.clone(), relevance.sum().as_f64())];
    for idx in (0..=s.site.act_index).rev() {
        let layer = &layers[idx];
        let input = s.trace.layer_input(idx);
        relevance = match &layer.kind {
            LayerKind::Relu => relevance,
            LayerKind::MaxPool { .. } => maxpool_backward(
                &relevance,
                s.trace.switches_at(idx).expect("pool layer records switches"),
                input.shape(),
            )?,
            LayerKind::Conv(p) => {
                let z = conv2d_forward(input, &p.weights, &p.bias, p.stride, p.pad)?;
                let eps = T::of(epsilon);
                let ratio = relevance.zip_map(&z, "lrp", |r, z| {
                    let stab = if z >= T::zero() { z + eps } else { z - eps };
                    r / stab
                })?;
                let c = conv2d_input_grad(&ratio, &p.weights, p.stride, p.pad, input.shape())?;
                input.zip_map(&c, "lrp", |a, c| a * c)?
            }
        };
        if !relevance.all_finite() {
            return Err(Error::NonFinite(format!("LRP relevance at layer `{}`", layer.name)));
        }
        let below = if idx == 0 { "input".to_string() } else { layers[idx - 1].name.clone() };
        sums.push((below, relevance.sum().as_f64()));
    }
    Ok(Attribution {
        map: relevance,
        dead_kernel: s.dead,
        relevance_sums: sums,
    })
}

pub fn baseline_map<T: Real>(
    net: &NetworkSpec<T>,
    x: &Tensor<T>,
    kernel: &KernelRef,
    kind: BaselineKind,
) -> Result<Attribution<T>> {
    match kind {
        BaselineKind::Deconv => deconv_map(net, x, kernel),
        BaselineKind::Gbp => gbp_map(net, x, kernel),
        BaselineKind::Lrp { epsilon } => lrp_map(net, x, kernel, epsilon),
    }
}

/// Turns an input-shaped map into a legal network input.
///
/// With [`Rescale::MinMax`] the map's global minimum and maximum land on
/// pixel values 0 and 1, which are then normalized per channel; a constant
/// map becomes the zero tensor.
pub fn estimate_to_input<T: Real>(map: &Tensor<T>, net: &NetworkSpec<T>, rescale: Rescale) -> Result<Tensor<T>> {
    let shape = net.input_shape();
    if map.shape() != shape {
        return Err(Error::shape(
            "estimate_to_input",
            format!("map has shape {:?}, network input is {:?}", map.shape(), shape),
        ));
    }
    if rescale == Rescale::None {
        return Ok(map.clone());
    }
    let (lo, hi) = (map.min().as_f64(), map.max().as_f64());
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return Ok(Tensor::zeros(map.shape()));
    }
    let norm = net.normalization();
    let plane = shape[1] * shape[2];
    let mut out = map.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (mean, std) = (norm.mean[c], norm.std[c]);
        for v in chunk {
            let pixel = (v.as_f64() - lo) / span;
            *v = T::of((pixel - mean) / std);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BaselineEval<T: Real = f32> {
    pub kind: BaselineKind,
    pub estimate: Tensor<T>,
    /// Feature maps of the kernel's layer on the re-fed estimate, `[N, H, W]`.
    pub f_hat_maps: Tensor<T>,
    pub dead_kernel: bool,
}

pub fn evaluate_baseline<T: Real>(
    net: &NetworkSpec<T>,
    x: &Tensor<T>,
    kernel: &KernelRef,
    kind: BaselineKind,
    rescale: Rescale,
) -> Result<BaselineEval<T>> {
    let attribution = baseline_map(net, x, kernel, kind)?;
    let estimate = estimate_to_input(&attribution.map, net, rescale)?;
    let site = net.kernel_site(kernel)?;
    let trace = net.forward_through(&estimate, site.act_index)?;
    Ok(BaselineEval {
        kind,
        f_hat_maps: trace.output_at(site.act_index).clone(),
        estimate,
        dead_kernel: attribution.dead_kernel,
    })
}
