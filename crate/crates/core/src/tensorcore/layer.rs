use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    /// 2×2 window, stride 2.
    MaxPool2,
    GlobalAvgPool,
    Flatten,
}

impl LayerKind {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// Weight and bias shapes for parameterized kinds.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` used by weight initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((in_features, out_features)),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            _ => None,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => write!(f, "dense({in_features},{out_features})"),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(
                f,
                "conv2d({in_channels},{out_channels},{kernel},{stride},{pad})"
            ),
            LayerKind::Relu => f.write_str("relu"),
            LayerKind::MaxPool2 => f.write_str("maxpool2"),
            LayerKind::GlobalAvgPool => f.write_str("gap"),
            LayerKind::Flatten => f.write_str("flatten"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    fn mismatch(&self, input: &[usize], expected: &str) -> Error {
        Error::config(format!(
            "layer '{}' ({}) cannot take input of shape {input:?}: expected {expected}",
            self.name, self.kind
        ))
    }

    /// Checks dimensions and kernel parity.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => Err(Error::config(format!(
                "layer '{}': dense dimensions must be positive",
                self.name
            ))),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    Err(Error::config(format!(
                        "layer '{}': conv dimensions must be positive",
                        self.name
                    )))
                } else if kernel % 2 == 0 {
                    Err(Error::config(format!(
                        "layer '{}': conv kernel {kernel} must be odd",
                        self.name
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Output shape for a single sample (no batch axis).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => match input {
                [f] if *f == in_features => Ok(vec![out_features]),
                _ => Err(self.mismatch(input, &format!("[{in_features}]"))),
            },
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => match *input {
                [c, h, w] if c == in_channels && h + 2 * pad >= kernel && w + 2 * pad >= kernel => {
                    Ok(vec![
                        out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    ])
                }
                _ => Err(self.mismatch(
                    input,
                    &format!("[{in_channels}, h, w] with h, w + 2·{pad} ≥ {kernel}"),
                )),
            },
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2 => match *input {
                [c, h, w] if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(self.mismatch(input, "[c, h ≥ 2, w ≥ 2]")),
            },
            LayerKind::GlobalAvgPool => match *input {
                [c, _, _] => Ok(vec![c]),
                _ => Err(self.mismatch(input, "[c, h, w]")),
            },
            LayerKind::Flatten => {
                if input.is_empty() {
                    Err(self.mismatch(input, "a non-scalar sample"))
                } else {
                    Ok(vec![input.iter().product()])
                }
            }
        }
    }

    pub(crate) fn conv_geometry(&self, input: &[usize]) -> Result<ConvGeometry> {
        let out = self.output_shape(input)?;
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => Ok(ConvGeometry {
                c_in: in_channels,
                c_out: out_channels,
                k: kernel,
                stride,
                pad,
                h: input[1],
                w: input[2],
                h_out: out[1],
                w_out: out[2],
            }),
            _ => Err(Error::usage(format!("layer '{}' is not a conv", self.name))),
        }
    }

    pub(crate) fn check_params(&self, weight: &Tensor, bias: &Tensor) -> Result<()> {
        let (ws, bs) = self.kind.param_shapes().ok_or_else(|| {
            Error::usage(format!("layer '{}' takes no parameters", self.name))
        })?;
        if weight.shape() != ws.as_slice() || bias.shape() != bs.as_slice() {
            return Err(Error::config(format!(
                "layer '{}': parameter shapes {:?}/{:?} do not match {ws:?}/{bs:?}",
                self.name,
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(())
    }
}

/// Pure batched forward pass of one layer. `input` carries a leading batch
/// axis; `params` is `(weight, bias)` for dense and conv layers.
pub fn forward(layer: &LayerSpec, params: Option<(&Tensor, &Tensor)>, input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::config(format!(
            "layer '{}': input {shape:?} lacks a batch axis",
            layer.name
        )));
    }
    let batch = shape[0];
    let sample = &shape[1..];
    let out_sample = layer.output_shape(sample)?;
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&out_sample);
    let x = input.data();
    let data = match layer.kind {
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            let (w, b) = require_params(layer, params)?;
            kernels::dense_forward(batch, in_features, out_features, x, w.data(), b.data())
        }
        LayerKind::Conv2d { .. } => {
            let (w, b) = require_params(layer, params)?;
            let g = layer.conv_geometry(sample)?;
            kernels::conv2d_forward(&g, batch, x, w.data(), b.data())
        }
        LayerKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        LayerKind::MaxPool2 => {
            kernels::maxpool2_forward(batch, sample[0], sample[1], sample[2], x).0
        }
        LayerKind::GlobalAvgPool => {
            kernels::global_avg_pool_forward(batch * sample[0], sample[1] * sample[2], x)
        }
        LayerKind::Flatten => x.to_vec(),
    };
    Tensor::new(out_shape, data)
}

pub(crate) fn require_params<'a>(
    layer: &LayerSpec,
    params: Option<(&'a Tensor, &'a Tensor)>,
) -> Result<(&'a Tensor, &'a Tensor)> {
    let (w, b) = params.ok_or_else(|| {
        Error::config(format!("layer '{}' requires weight and bias", layer.name))
    })?;
    layer.check_params(w, b)?;
    Ok((w, b))
}
