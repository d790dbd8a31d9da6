//! Differentiable layers and a sequential stack built from [`LayerSpec`]s.
//!
//! All spatial layers take `(batch, channel, height, width)` tensors. Layer
//! parameters are ordinary tape leaves, so a stack's weights can be swapped
//! between precisions (single precision for training, double for gradient
//! checks) without touching the architecture.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2`; preserves extents at stride 1. Odd kernels only.
    Same,
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> Result<usize> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same if k % 2 == 1 => Ok((k - 1) / 2),
            Padding::Same => Err(TensorError::InvalidArgument(format!(
                "same padding needs an odd kernel, got {k}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Over the last axis.
    Softmax,
}

/// Whether stochastic layers are active.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    Sigmoid,
    Softmax,
    Dropout {
        rate: f64,
    },
    Flatten,
    /// Inverse of `Flatten`: `[b, c*h*w] -> [b, c, h, w]`.
    Unflatten {
        channels: usize,
        height: usize,
        width: usize,
    },
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(TensorError::InvalidArgument(format!("{what} must be >= 1")))
    } else {
        Ok(())
    }
}

fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )))
    }
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k > extent + 2 * pad {
        return Err(TensorError::InvalidArgument(format!(
            "kernel {k} larger than padded extent {}",
            extent + 2 * pad
        )));
    }
    Ok((extent + 2 * pad - k) / stride + 1)
}

fn pool_out(extent: usize, window: usize, stride: usize) -> Result<usize> {
    if window > extent {
        return Err(TensorError::InvalidArgument(format!(
            "pool window {window} larger than extent {extent}"
        )));
    }
    if stride == window && extent % window != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "extent {extent} not divisible by pool window {window}"
        )));
    }
    Ok((extent - window) / stride + 1)
}

fn need_rank(shape: &[usize], rank: usize, layer: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::InvalidArgument(format!(
            "{layer} expects a rank-{rank} input, got {shape:?}"
        )));
    }
    Ok(())
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                positive("filter count", filters)?;
                positive("kernel extent", kernel)?;
                positive("stride", stride)?;
                padding.amount(kernel).map(|_| ())
            }
            LayerSpec::MaxPool2d { window, stride } => {
                positive("pool window", window)?;
                positive("stride", stride)
            }
            LayerSpec::UpsampleNearest { factor } => positive("upsample factor", factor),
            LayerSpec::Dense { units } => positive("units", units),
            LayerSpec::Dropout { rate } => check_dropout_rate(rate),
            LayerSpec::Unflatten {
                channels,
                height,
                width,
            } => {
                positive("channels", channels)?;
                positive("height", height)?;
                positive("width", width)
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Softmax | LayerSpec::Flatten => {
                Ok(())
            }
        }
    }

    /// Per-sample output shape (batch axis excluded).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match *self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                need_rank(input, 3, "conv2d")?;
                let pad = padding.amount(kernel)?;
                Ok(vec![
                    filters,
                    conv_out(input[1], kernel, stride, pad)?,
                    conv_out(input[2], kernel, stride, pad)?,
                ])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                need_rank(input, 3, "maxpool2d")?;
                Ok(vec![
                    input[0],
                    pool_out(input[1], window, stride)?,
                    pool_out(input[2], window, stride)?,
                ])
            }
            LayerSpec::UpsampleNearest { factor } => {
                need_rank(input, 3, "upsample")?;
                Ok(vec![input[0], input[1] * factor, input[2] * factor])
            }
            LayerSpec::Dense { units } => {
                need_rank(input, 1, "dense")?;
                Ok(vec![units])
            }
            LayerSpec::Flatten => {
                need_rank(input, 3, "flatten")?;
                Ok(vec![input.iter().product()])
            }
            LayerSpec::Unflatten {
                channels,
                height,
                width,
            } => {
                need_rank(input, 1, "unflatten")?;
                if input[0] != channels * height * width {
                    return Err(TensorError::InvalidArgument(format!(
                        "cannot unflatten {} into {channels}x{height}x{width}",
                        input[0]
                    )));
                }
                Ok(vec![channels, height, width])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Softmax | LayerSpec::Dropout { .. } => {
                Ok(input.to_vec())
            }
        }
    }

    /// Weight and bias shapes for parametric layers.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                filters, kernel, ..
            } => Some((vec![filters, input[0], kernel, kernel], vec![filters])),
            LayerSpec::Dense { units } => Some((vec![input[0], units], vec![units])),
            _ => None,
        }
    }
}

/// Uniform on `±sqrt(6 / fan_in)`; for layers followed by ReLU.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let limit = (6.0 / fan_in as f64).sqrt();
    uniform(shape, limit, rng)
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Real>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, limit, rng)
}

fn uniform<T: Real>(shape: &[usize], limit: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.uniform_range(-limit, limit)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Inverted-dropout mask: zero with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut Rng) -> Result<Vec<T>> {
    check_dropout_rate(rate)?;
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| if rng.uniform() < rate { T::ZERO } else { keep })
        .collect())
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `input [b,c,h,w]` with `weight [f,c,k,k]` plus `bias [f]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let xs = self.node_value(ix).shape().to_vec();
        let ws = self.node_value(iw).shape().to_vec();
        let bs = self.node_value(ib).shape().to_vec();
        need_rank(&xs, 4, "conv2d")?;
        need_rank(&ws, 4, "conv2d weight")?;
        positive("stride", stride)?;
        if ws[1] != xs[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if ws[2] != ws[3] {
            return Err(TensorError::InvalidArgument(format!(
                "conv2d kernels must be square, got {ws:?}"
            )));
        }
        if bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: ws,
                rhs: bs,
            });
        }
        let k = ws[2];
        let pad = padding.amount(k)?;
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            h: xs[2],
            w: xs[3],
            out_c: ws[0],
            k,
            stride,
            pad,
            out_h: conv_out(xs[2], k, stride, pad)?,
            out_w: conv_out(xs[3], k, stride, pad)?,
        };
        let out = kernels::conv2d_forward(
            self.node_value(ix).data(),
            self.node_value(iw).data(),
            self.node_value(ib).data(),
            &geom,
        );
        let value = Tensor::from_parts(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], out);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input: ix,
                weight: iw,
                bias: ib,
                geom,
            },
            &[ix, iw, ib],
        )
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let ix = self.idx(input)?;
        let xs = self.node_value(ix).shape().to_vec();
        need_rank(&xs, 4, "maxpool2d")?;
        positive("pool window", window)?;
        positive("stride", stride)?;
        pool_out(xs[2], window, stride)?;
        pool_out(xs[3], window, stride)?;
        let (out, argmax, oh, ow) = kernels::maxpool_forward(
            self.node_value(ix).data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
            window,
            stride,
        );
        let value = Tensor::from_parts(vec![xs[0], xs[1], oh, ow], out);
        self.push("maxpool2d", value, Op::MaxPool { input: ix, argmax }, &[ix])
    }

    /// Flat input indices selected by a max-pool node.
    pub fn pool_argmax(&self, pooled: Var) -> Option<&[usize]> {
        let _ = self.idx(pooled).ok()?;
        match self.op_of(pooled.index()) {
            Op::MaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let ix = self.idx(input)?;
        let xs = self.node_value(ix).shape().to_vec();
        need_rank(&xs, 4, "upsample_nearest")?;
        positive("upsample factor", factor)?;
        let planes = xs[0] * xs[1];
        let out = kernels::upsample_forward(self.node_value(ix).data(), planes, xs[2], xs[3], factor);
        let value = Tensor::from_parts(vec![xs[0], xs[1], xs[2] * factor, xs[3] * factor], out);
        self.push(
            "upsample_nearest",
            value,
            Op::Upsample {
                input: ix,
                planes,
                h: xs[2],
                w: xs[3],
                factor,
            },
            &[ix],
        )
    }

    /// `input [b,n] · weight [n,m] + bias [m]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let xs = self.node_value(ix).shape().to_vec();
        let ws = self.node_value(iw).shape().to_vec();
        let bs = self.node_value(ib).shape().to_vec();
        need_rank(&xs, 2, "dense")?;
        need_rank(&ws, 2, "dense weight")?;
        if xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != [ws[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "dense bias",
                lhs: ws,
                rhs: bs,
            });
        }
        let (b, n, m) = (xs[0], xs[1], ws[1]);
        let bias_v = self.node_value(ib).data();
        let mut out: Vec<T> = (0..b).flat_map(|_| bias_v.iter().copied()).collect();
        T::gemm(
            false,
            false,
            b,
            m,
            n,
            T::ONE,
            self.node_value(ix).data(),
            self.node_value(iw).data(),
            T::ONE,
            &mut out,
        );
        self.push(
            "dense",
            Tensor::from_parts(vec![b, m], out),
            Op::Dense {
                input: ix,
                weight: iw,
                bias: ib,
            },
            &[ix, iw, ib],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let ix = self.idx(input)?;
        let x = self.node_value(ix);
        let out = x.data().iter().map(|&v| v.max(T::ZERO)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.push("relu", value, Op::Relu(ix), &[ix])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let ix = self.idx(input)?;
        let x = self.node_value(ix);
        let out = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.push("sigmoid", value, Op::Sigmoid(ix), &[ix])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let ix = self.idx(input)?;
        let x = self.node_value(ix);
        let k = *x.shape().last().expect("shapes are non-empty");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().copied().fold(row[0], T::max);
            let mut total = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax(ix), &[ix])
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
            Activation::Softmax => self.softmax(input),
        }
    }

    /// Inverted dropout. Identity in inference mode or at rate 0.
    pub fn dropout(&mut self, input: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
        check_dropout_rate(rate)?;
        match mode {
            Mode::Infer => Ok(input),
            Mode::Train(_) if rate == 0.0 => Ok(input),
            Mode::Train(rng) => {
                let len = self.value(input)?.len();
                let mask = dropout_mask(len, rate, rng)?;
                self.apply_mask(input, mask)
            }
        }
    }

    /// Elementwise product with a fixed mask (a frozen dropout draw).
    pub fn apply_mask(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        let ix = self.idx(input)?;
        let x = self.node_value(ix);
        if mask.len() != x.len() {
            return Err(TensorError::ShapeMismatch {
                op: "apply_mask",
                lhs: x.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.push("dropout", value, Op::MaskMul { input: ix, mask }, &[ix])
    }

    /// `[b, c, h, w] -> [b, c*h*w]`, row-major.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input)?.to_vec();
        need_rank(&xs, 4, "flatten")?;
        self.reshape(input, &[xs[0], xs[1] * xs[2] * xs[3]])
    }
}

#[inline]
fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// A chain of layers with statically inferred shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

impl Sequential {
    /// `input_shape` excludes the batch axis.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        let stack = Self {
            input_shape: input_shape.to_vec(),
            layers,
        };
        stack.shapes()?;
        Ok(stack)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Input shape followed by the output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes()
            .expect("validated at construction")
            .pop()
            .expect("non-empty")
    }

    /// `(name, shape)` of every parameter, in forward order.
    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let shapes = self.shapes().expect("validated at construction");
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.param_shapes(&shapes[i]) {
                out.push((format!("{prefix}.{i}.weight"), w));
                out.push((format!("{prefix}.{i}.bias"), b));
            }
        }
        out
    }

    /// He-uniform weights for layers directly followed by ReLU, Glorot-uniform
    /// otherwise; zero biases.
    pub fn init_params<T: Real>(&self, prefix: &str, rng: &mut Rng) -> Result<Vec<(String, Tensor<T>)>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let Some((ws, bs)) = layer.param_shapes(&shapes[i]) else {
                continue;
            };
            let (fan_in, fan_out) = match layer {
                LayerSpec::Conv2d { kernel, .. } => (ws[1] * kernel * kernel, ws[0] * kernel * kernel),
                _ => (ws[0], ws[1]),
            };
            let relu_next = matches!(self.layers.get(i + 1), Some(LayerSpec::Relu));
            let w = if relu_next {
                he_uniform(&ws, fan_in, rng)?
            } else {
                glorot_uniform(&ws, fan_in, fan_out, rng)?
            };
            out.push((format!("{prefix}.{i}.weight"), w));
            out.push((format!("{prefix}.{i}.bias"), Tensor::zeros(&bs)?));
        }
        Ok(out)
    }

    /// Runs the stack. `params` are the tape leaves for [`Self::param_shapes`], in order.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        params: &[Var],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let expected = self.param_shapes("").len();
        if params.len() != expected {
            return Err(TensorError::InvalidArgument(format!(
                "stack needs {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        let got = tape.shape(input)?;
        if got.len() != self.input_shape.len() + 1 || got[1..] != self.input_shape[..] {
            return Err(TensorError::ShapeMismatch {
                op: "sequential input",
                lhs: got.to_vec(),
                rhs: self.input_shape.clone(),
            });
        }
        let mut params = params.iter().copied();
        let mut next = || params.next().expect("count checked above");
        let mut x = input;
        for layer in &self.layers {
            x = match *layer {
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let (w, b) = (next(), next());
                    tape.conv2d(x, w, b, stride, padding)?
                }
                LayerSpec::MaxPool2d { window, stride } => tape.maxpool2d(x, window, stride)?,
                LayerSpec::UpsampleNearest { factor } => tape.upsample_nearest(x, factor)?,
                LayerSpec::Dense { .. } => {
                    let (w, b) = (next(), next());
                    tape.dense(x, w, b)?
                }
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::Sigmoid => tape.sigmoid(x)?,
                LayerSpec::Softmax => tape.softmax(x)?,
                LayerSpec::Dropout { rate } => tape.dropout(x, rate, mode)?,
                LayerSpec::Flatten => tape.flatten(x)?,
                LayerSpec::Unflatten {
                    channels,
                    height,
                    width,
                } => {
                    let b = tape.shape(x)?[0];
                    tape.reshape(x, &[b, channels, height, width])?
                }
            };
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    fn eval<F>(f: F) -> Tensor<f64>
    where
        F: FnOnce(&mut Tape<f64>) -> Var,
    {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).unwrap().clone()
    }

    #[test]
    fn conv_same_padding_full_resolution_shape() {
        let out = eval(|tp| {
            let x = tp.constant(Tensor::zeros(&[1, 1, 256, 256]).unwrap());
            let w = tp.constant(Tensor::zeros(&[32, 1, 3, 3]).unwrap());
            let b = tp.constant(Tensor::zeros(&[32]).unwrap());
            tp.conv2d(x, w, b, 1, Padding::Same).unwrap()
        });
        assert_eq!(out.shape(), &[1, 32, 256, 256]);
    }

    #[test]
    fn conv_identity_kernel() {
        let img: Vec<f64> = (0..25).map(|v| v as f64 * 0.3).collect();
        let out = eval(|tp| {
            let x = tp.constant(t(&[1, 1, 5, 5], img.clone()));
            let w = tp.constant(t(&[1, 1, 1, 1], vec![1.0]));
            let b = tp.constant(t(&[1], vec![0.0]));
            tp.conv2d(x, w, b, 1, Padding::Valid).unwrap()
        });
        assert_eq!(out.data(), &img[..]);
    }

    #[test]
    fn conv_ones_kernel_sums_windows() {
        // 4x4 ramp 0..16, valid 3x3 ones kernel
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let out = eval(|tp| {
            let x = tp.constant(t(&[1, 1, 4, 4], img.clone()));
            let w = tp.constant(t(&[1, 1, 3, 3], vec![1.0; 9]));
            let b = tp.constant(t(&[1], vec![0.0]));
            tp.conv2d(x, w, b, 1, Padding::Valid).unwrap()
        });
        // windows: {0,1,2,4,5,6,8,9,10} = 45, shift by 1 -> 54, by 4 -> 81, by 5 -> 90
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[45.0, 54.0, 81.0, 90.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tp = Tape::<f32>::new();
        let x = tp.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let w = tp.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        let b = tp.constant(Tensor::zeros(&[1]).unwrap());
        assert!(matches!(
            tp.conv2d(x, w, b, 1, Padding::Same),
            Err(TensorError::ShapeMismatch { op: "conv2d", .. })
        ));
    }

    #[test]
    fn maxpool_basic_and_shape() {
        let out = eval(|tp| {
            let x = tp.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
            tp.maxpool2d(x, 2, 2).unwrap()
        });
        assert_eq!(out.data(), &[4.0]);
        let out = eval(|tp| {
            let x = tp.constant(Tensor::zeros(&[1, 32, 256, 256]).unwrap());
            tp.maxpool2d(x, 2, 2).unwrap()
        });
        assert_eq!(out.shape(), &[1, 32, 128, 128]);
        let mut tp = Tape::<f32>::new();
        let x = tp.constant(Tensor::zeros(&[1, 1, 5, 4]).unwrap());
        assert!(tp.maxpool2d(x, 2, 2).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let out = eval(|tp| {
            let x = tp.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
            tp.upsample_nearest(x, 2).unwrap()
        });
        assert_eq!(
            out.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let ident = eval(|tp| {
            let x = tp.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
            tp.upsample_nearest(x, 1).unwrap()
        });
        assert_eq!(ident.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn upsample_backward_is_block_sum() {
        let mut tp = Tape::<f64>::new();
        let x = tp.param(t(&[1, 2, 2, 3], vec![0.5; 12]));
        let y = tp.upsample_nearest(x, 3).unwrap();
        let loss = tp.sum(y).unwrap();
        let g = tp.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn dense_hand_example() {
        let out = eval(|tp| {
            let x = tp.constant(t(&[1, 2], vec![1.0, 2.0]));
            let w = tp.constant(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
            let b = tp.constant(t(&[2], vec![1.0, 1.0]));
            tp.dense(x, w, b).unwrap()
        });
        assert_eq!(out.data(), &[2.0, 3.0]);
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::zeros(&[1, 3]).unwrap());
        let w = tp.constant(Tensor::zeros(&[2, 2]).unwrap());
        let b = tp.constant(Tensor::zeros(&[2]).unwrap());
        assert!(tp.dense(x, w, b).is_err());
    }

    #[test]
    fn activations() {
        let s = eval(|tp| {
            let x = tp.constant(t(&[1, 2], vec![0.0, 0.0]));
            tp.softmax(x).unwrap()
        });
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = eval(|tp| {
            let x = tp.constant(t(&[1, 2], vec![1000.0, 1000.0]));
            tp.softmax(x).unwrap()
        });
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = eval(|tp| {
            let x = tp.constant(t(&[1], vec![0.0]));
            tp.sigmoid(x).unwrap()
        });
        assert_eq!(s.data(), &[0.5]);
        let r = eval(|tp| {
            let x = tp.constant(t(&[3], vec![-1.0, 0.0, 2.0]));
            tp.relu(x).unwrap()
        });
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let mut rng = Rng::new(1);
        assert_eq!(tp.dropout(x, 0.0, &mut Mode::Train(&mut rng)).unwrap(), x);
        assert_eq!(tp.dropout(x, 0.5, &mut Mode::Infer).unwrap(), x);
        assert!(tp.dropout(x, 1.0, &mut Mode::Infer).is_err());
    }

    #[test]
    fn dropout_monte_carlo() {
        let n = 100_000;
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::create(&[n], crate::Init::Constant(1.0)).unwrap());
        let mut rng = Rng::new(11);
        let y = tp.dropout(x, 0.5, &mut Mode::Train(&mut rng)).unwrap();
        let d = tp.value(y).unwrap().data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let zero_frac = d.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((zero_frac - 0.5).abs() < 0.01, "zeros {zero_frac}");
    }

    #[test]
    fn flatten_row_major() {
        let out = eval(|tp| {
            let x = tp.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
            tp.flatten(x).unwrap()
        });
        assert_eq!(out.shape(), &[1, 4]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
        let out = eval(|tp| {
            let x = tp.constant(Tensor::zeros(&[1, 32, 64, 64]).unwrap());
            let f = tp.flatten(x).unwrap();
            assert_eq!(tp.shape(f).unwrap(), &[1, 131_072]);
            tp.reshape(f, &[1, 32, 64, 64]).unwrap()
        });
        assert_eq!(out.shape(), &[1, 32, 64, 64]);
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { rate: -0.1 }.validate().is_err());
        assert!(LayerSpec::Dense { units: 0 }.validate().is_err());
        assert!(LayerSpec::Conv2d {
            filters: 4,
            kernel: 2,
            stride: 1,
            padding: Padding::Same
        }
        .validate()
        .is_err());
        assert!(LayerSpec::UpsampleNearest { factor: 0 }.validate().is_err());
    }

    #[test]
    fn sequential_shapes_and_init() {
        let stack = Sequential::new(
            &[1, 8, 8],
            vec![
                LayerSpec::Conv2d {
                    filters: 4,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
                LayerSpec::Softmax,
            ],
        )
        .unwrap();
        assert_eq!(stack.output_shape(), vec![3]);
        let names: Vec<_> = stack.param_shapes("clf").into_iter().map(|p| p.0).collect();
        assert_eq!(names, ["clf.0.weight", "clf.0.bias", "clf.4.weight", "clf.4.bias"]);
        let a: Vec<(String, Tensor<f32>)> = stack.init_params("clf", &mut Rng::new(5)).unwrap();
        let b: Vec<(String, Tensor<f32>)> = stack.init_params("clf", &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        // He limit for the conv: sqrt(6/9)
        let limit = (6.0f32 / 9.0).sqrt();
        assert!(a[0].1.data().iter().all(|v| v.abs() <= limit));
        assert!(a[1].1.data().iter().all(|&v| v == 0.0));
    }
}
