use candle_core::{Tensor, Var, D};

use super::params::ParamStore;
use crate::error::{Error, Result};

const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
const NORM_EPS: f64 = 1e-5;

/// Weight initialization scale, by the activation that follows the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `sqrt(2 / fan_in)`, for ReLU layers.
    He,
    /// `sqrt(1 / fan_in)`, for SELU and linear layers.
    Lecun,
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Lecun => (1.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: Option<usize>,
    pub dilation: usize,
    pub bias: bool,
    pub init: Init,
}

impl Default for ConvOpts {
    fn default() -> Self {
        ConvOpts {
            stride: 1,
            padding: None,
            dilation: 1,
            bias: true,
            init: Init::He,
        }
    }
}

impl Conv2d {
    /// Square kernel; padding defaults to "same" for stride 1.
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, opts: ConvOpts) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Invalid(format!("conv `{name}` has zero channels ({c_in} -> {c_out})")));
        }
        let weight = ps.normal(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], opts.init.std(c_in * kernel * kernel))?;
        let bias = if opts.bias {
            Some(ps.zeros(&format!("{name}.bias"), &[c_out])?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: opts.stride,
            padding: opts.padding.unwrap_or(opts.dilation * (kernel - 1) / 2),
            dilation: opts.dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// 2x2 transposed convolution with stride 2 (doubles the resolution).
#[derive(Debug, Clone)]
pub struct UpConv2x {
    weight: Var,
    bias: Var,
}

impl UpConv2x {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Invalid(format!("transposed conv `{name}` has zero channels")));
        }
        Ok(UpConv2x {
            weight: ps.normal(&format!("{name}.weight"), &[c_in, c_out, 2, 2], Init::Lecun.std(c_in))?,
            bias: ps.zeros(&format!("{name}.bias"), &[c_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

pub fn selu(x: &Tensor) -> Result<Tensor> {
    Ok((x.elu(SELU_ALPHA)? * SELU_SCALE)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
/// The whole gradient goes to the maximum of each window.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    let x = x.narrow(2, 0, 2 * h2)?.narrow(3, 0, 2 * w2)?.contiguous()?;
    Ok(x.reshape((n, c, h2, 2, w2, 2))?.max(5)?.max(3)?)
}

/// Parameter-free per-sample, per-channel normalization over `H x W`.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// Log-softmax over the channel axis (dim 1).
pub fn log_softmax_channels(logits: &Tensor) -> Result<Tensor> {
    // The max shift cancels analytically, so it can be detached.
    let m = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_channels(logits)?.exp()?)
}

/// Fixed per-channel input standardization applied to `[0,1]` RGB batches.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InputNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl InputNorm {
    pub const IMAGENET: InputNorm = InputNorm {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let dev = x.device();
        let mean = Tensor::new(&self.mean, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let inv = Tensor::new(&self.std.map(|s| 1.0 / s), dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_mul(&inv)?)
    }
}

impl Default for InputNorm {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Spatially-adaptive normalization: the activation is instance-normalized and
/// then modulated by a scale and shift predicted from the label map.
#[derive(Debug, Clone)]
pub struct Spade {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Spade {
    pub fn new(ps: &mut ParamStore, name: &str, label_channels: usize, hidden: usize, channels: usize) -> Result<Self> {
        let lin = ConvOpts {
            init: Init::Lecun,
            ..ConvOpts::default()
        };
        Ok(Spade {
            shared: Conv2d::new(ps, &format!("{name}.shared"), label_channels, hidden, 3, ConvOpts::default())?,
            gamma: Conv2d::new(ps, &format!("{name}.gamma"), hidden, channels, 3, lin)?,
            beta: Conv2d::new(ps, &format!("{name}.beta"), hidden, channels, 3, lin)?,
        })
    }

    /// `labels` must already be at the activation's resolution.
    pub fn forward(&self, x: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let normed = instance_norm(x)?;
        let actv = self.shared.forward(labels)?.relu()?;
        let gamma = self.gamma.forward(&actv)?;
        let beta = self.beta.forward(&actv)?;
        Ok(((normed * (gamma + 1.0)?)? + beta)?)
    }
}
