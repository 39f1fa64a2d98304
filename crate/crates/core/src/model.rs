//! Compact U-Net producing per-pixel class logits.
//!
//! For depth `d` and base width `c`, level `i` works at `c·2^i` channels:
//!
//! ```text
//! enc_i   : conv3x3(in → c·2^i), relu, conv3x3(c·2^i → c·2^i), relu, maxpool2
//! bottom  : conv3x3(c·2^(d-1) → c·2^d), relu, conv3x3(c·2^d → c·2^d), relu
//! dec_i   : upsample2, concat(skip_i), conv3x3(c·2^(i+1) + c·2^i → c·2^i), relu,
//!           conv3x3(c·2^i → c·2^i), relu
//! head    : conv1x1(c → num_classes)
//! ```
//!
//! Every convolution contributes `out·in·k² + out` parameters (`k` = 3, or
//! 1 for the head), which is what [`param_count`] sums.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            base_channels: 8,
            depth: 2,
            num_classes: 9,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.base_channels == 0
            || self.depth == 0
            || self.num_classes == 0
        {
            return Err(Error::Config(format!(
                "all U-Net extents must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One convolution layer of the architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    fn new(name: String, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            name,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        )
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(self.out_channels, 1, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Convolutions in forward order.
pub fn layers(cfg: &UNetConfig) -> Vec<ConvSpec> {
    let mut out = Vec::new();
    let mut prev = cfg.in_channels;
    for i in 0..cfg.depth {
        let w = cfg.width(i);
        out.push(ConvSpec::new(format!("enc{i}.conv0"), prev, w, 3));
        out.push(ConvSpec::new(format!("enc{i}.conv1"), w, w, 3));
        prev = w;
    }
    let wb = cfg.width(cfg.depth);
    out.push(ConvSpec::new("bottom.conv0".into(), prev, wb, 3));
    out.push(ConvSpec::new("bottom.conv1".into(), wb, wb, 3));
    prev = wb;
    for i in (0..cfg.depth).rev() {
        let w = cfg.width(i);
        out.push(ConvSpec::new(format!("dec{i}.conv0"), prev + w, w, 3));
        out.push(ConvSpec::new(format!("dec{i}.conv1"), w, w, 3));
        prev = w;
    }
    out.push(ConvSpec::new("head".into(), prev, cfg.num_classes, 1));
    out
}

pub fn param_count(cfg: &UNetConfig) -> usize {
    layers(cfg).iter().map(ConvSpec::param_count).sum()
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Weights and biases, two entries per convolution in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: UNetConfig,
    pub entries: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal weights (variance 2 / fan_in), zero biases.
    pub fn init(cfg: &UNetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut entries = Vec::new();
        for layer in layers(cfg) {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let ws = layer.weight_shape();
            let w: Vec<T> = (0..ws.numel())
                .map(|_| T::from_f64_lossy(normal.sample(rng)))
                .collect();
            entries.push(NamedTensor {
                name: format!("{}.weight", layer.name),
                tensor: Tensor::from_vec(ws, w)?,
            });
            entries.push(NamedTensor {
                name: format!("{}.bias", layer.name),
                tensor: Tensor::zeros(layer.bias_shape()),
            });
        }
        Ok(ModelParams {
            config: *cfg,
            entries,
        })
    }

    /// Builds parameters from tensors in forward order, checking every shape.
    pub fn from_entries(cfg: &UNetConfig, entries: Vec<NamedTensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let expected: Vec<(String, Shape)> = layers(cfg)
            .into_iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), l.weight_shape()),
                    (format!("{}.bias", l.name), l.bias_shape()),
                ]
            })
            .collect();
        let found: usize = entries.iter().map(|e| e.tensor.numel()).sum();
        if entries.len() != expected.len() || found != param_count(cfg) {
            return Err(Error::ParamCountMismatch {
                expected: param_count(cfg),
                found,
            });
        }
        for (e, (name, shape)) in entries.iter().zip(&expected) {
            if &e.name != name || e.tensor.shape() != *shape {
                return shape_err(format!(
                    "parameter `{}` {} does not match expected `{name}` {shape}",
                    e.name,
                    e.tensor.shape()
                ));
            }
        }
        Ok(ModelParams {
            config: *cfg,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Records every parameter as a leaf; tracked when `track` is set.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                let mut t = e.tensor.clone();
                t.set_track_grad(track);
                t.zero_grad();
                g.leaf(t)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Logits of shape (B, num_classes, H, W) for an input of shape (B, in, H, W).
/// `params` are the bound leaves returned by [`ModelParams::bind`].
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &UNetConfig,
    params: &[Var],
    input: Var,
) -> Result<Var> {
    let s = g.shape(input);
    if !s.height.is_multiple_of(cfg.stride()) || !s.width.is_multiple_of(cfg.stride()) {
        return shape_err(format!(
            "input extents {}x{} are not divisible by 2^{}",
            s.height, s.width, cfg.depth
        ));
    }
    if params.len() != 2 * layers(cfg).len() {
        return Err(Error::ParamCountMismatch {
            expected: 2 * layers(cfg).len(),
            found: params.len(),
        });
    }
    let mut next = params.chunks(2);
    let mut conv = |g: &mut Graph<T>, x: Var, relu: bool| -> Result<Var> {
        let wb = next.next().expect("layer count checked");
        let y = g.conv2d(x, wb[0], wb[1])?;
        Ok(if relu { g.relu(y) } else { y })
    };

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for _ in 0..cfg.depth {
        x = conv(g, x, true)?;
        x = conv(g, x, true)?;
        skips.push(x);
        x = g.downsample2(x)?;
    }
    x = conv(g, x, true)?;
    x = conv(g, x, true)?;
    for skip in skips.into_iter().rev() {
        let up = g.upsample2(x);
        x = g.concat_channels(up, skip)?;
        x = conv(g, x, true)?;
        x = conv(g, x, true)?;
    }
    conv(g, x, false)
}

/// Untracked forward pass.
pub fn predict<T: Scalar>(params: &ModelParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let y = forward(&mut g, &params.config, &vars, x)?;
    Ok(g.value(y).clone())
}

/// Untracked forward pass followed by the per-pixel channel softmax.
pub fn predict_probabilities<T: Scalar>(
    params: &ModelParams<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let logits = forward(&mut g, &params.config, &vars, x)?;
    let prob = g.softmax_channels(logits)?;
    Ok(g.value(prob).clone())
}

/// Per-pixel argmax over channels (lowest index on ties), as (B, H, W).
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> crate::LabelMap {
    let s = logits.shape();
    let d = logits.data();
    let mut out = Vec::with_capacity(s.batch * s.plane());
    for n in 0..s.batch {
        for p in 0..s.plane() {
            let base = n * s.item() + p;
            let mut best = 0;
            for c in 1..s.channels {
                if d[base + c * s.plane()] > d[base + best * s.plane()] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    crate::LabelMap::new(s.batch, s.height, s.width, out).expect("pixel count")
}
