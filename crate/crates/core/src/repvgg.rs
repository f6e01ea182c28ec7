//! Dual-mode RepVGG blocks.
//!
//! In multi-branch mode a block sums a 3×3 conv+BN, a 1×1 conv+BN and (when
//! shapes allow) a BN-only identity branch, then applies ReLU. [`RepVggBlock::fuse`]
//! folds the three branches into a single 3×3 convolution with bias that
//! reproduces the inference-mode output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::tape::{NormMode, Tape, Var};
use crate::tensor::{DType, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether a named tensor is trained or tracked as a statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Parameter,
    Buffer,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Bookkeeping collected during one forward pass.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub training: bool,
    /// `(batch-norm prefix, normalize node)` pairs whose batch statistics
    /// should be folded into the running estimates.
    pub bn_updates: Vec<(String, Var)>,
    /// Branch convolutions evaluated inside RepVGG blocks.
    pub block_conv_invocations: usize,
}

impl ForwardCtx {
    pub fn training() -> Self {
        ForwardCtx {
            training: true,
            ..Default::default()
        }
    }

    pub fn inference() -> Self {
        ForwardCtx::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize, dtype: DType) -> Self {
        BatchNorm {
            scale: Tensor::ones(&[channels], dtype),
            shift: Tensor::zeros(&[channels], dtype),
            running_mean: Tensor::zeros(&[channels], dtype),
            running_var: Tensor::ones(&[channels], dtype),
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    /// Per-channel `(s, t)` so that inference output is `s·x + t`.
    pub fn folded(&self) -> (Vec<f64>, Vec<f64>) {
        let mut s = Vec::with_capacity(self.channels());
        let mut t = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let sc = self.scale.data()[c] / libm::sqrt(self.running_var.data()[c] + self.eps);
            s.push(sc);
            t.push(self.shift.data()[c] - self.running_mean.data()[c] * sc);
        }
        (s, t)
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorRole)) {
        f(join(prefix, "scale"), &self.scale, TensorRole::Parameter);
        f(join(prefix, "shift"), &self.shift, TensorRole::Parameter);
        f(join(prefix, "running_mean"), &self.running_mean, TensorRole::Buffer);
        f(join(prefix, "running_var"), &self.running_var, TensorRole::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorRole)) {
        f(join(prefix, "scale"), &mut self.scale, TensorRole::Parameter);
        f(join(prefix, "shift"), &mut self.shift, TensorRole::Parameter);
        f(join(prefix, "running_mean"), &mut self.running_mean, TensorRole::Buffer);
        f(join(prefix, "running_var"), &mut self.running_var, TensorRole::Buffer);
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, prefix: &str, ctx: &mut ForwardCtx) -> Result<Var> {
        let scale = tape.param(&join(prefix, "scale"), self.scale.clone())?;
        let shift = tape.param(&join(prefix, "shift"), self.shift.clone())?;
        if ctx.training {
            let y = tape.normalize(x, NormMode::Batch, scale, shift, self.eps)?;
            ctx.bn_updates.push((String::from(prefix), y));
            return Ok(y);
        }
        let c = self.channels();
        let var_eps = self.running_var.data().iter().map(|v| v + self.eps).collect();
        let var_eps = tape.constant(Tensor::from_f64(&[c], var_eps)?);
        let std = tape.sqrt(var_eps)?;
        let s = tape.div(scale, std)?;
        let mean = tape.constant(self.running_mean.clone());
        let ms = tape.mul(mean, s)?;
        let t = tape.sub(shift, ms)?;
        let s = tape.reshape(s, &[1, c, 1, 1])?;
        let t = tape.reshape(t, &[1, c, 1, 1])?;
        let y = tape.mul(x, s)?;
        tape.add(y, t)
    }

    /// Exponential moving average update from biased batch statistics over `count` values.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize, momentum: f64) {
        let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            let m = (1.0 - momentum) * self.running_mean.data()[c] + momentum * mean[c];
            let v = (1.0 - momentum) * self.running_var.data()[c] + momentum * var[c] * unbias;
            self.running_mean.set(c, m);
            self.running_var.set(c, v);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    /// `[out, in, k, k]`, no bias.
    pub weight: Tensor,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branches {
    pub dense: ConvBn,
    pub pointwise: ConvBn,
    pub identity: Option<BatchNorm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockMode {
    MultiBranch(Branches),
    Fused(FusedConv),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepVggBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub mode: BlockMode,
}

fn kaiming<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let dist = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).expect("positive std");
    let data = (0..shape.iter().product()).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data, dtype).expect("finite samples")
}

impl RepVggBlock {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R, dtype: DType) -> Self {
        let has_identity = in_channels == out_channels && stride == 1;
        RepVggBlock {
            in_channels,
            out_channels,
            stride,
            mode: BlockMode::MultiBranch(Branches {
                dense: ConvBn {
                    weight: kaiming(rng, &[out_channels, in_channels, 3, 3], dtype),
                    bn: BatchNorm::new(out_channels, dtype),
                },
                pointwise: ConvBn {
                    weight: kaiming(rng, &[out_channels, in_channels, 1, 1], dtype),
                    bn: BatchNorm::new(out_channels, dtype),
                },
                identity: has_identity.then(|| BatchNorm::new(out_channels, dtype)),
            }),
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self.mode, BlockMode::Fused(_))
    }

    /// Branch convolutions one forward pass evaluates (identity counts as one).
    pub fn conv_invocations(&self) -> usize {
        match &self.mode {
            BlockMode::Fused(_) => 1,
            BlockMode::MultiBranch(b) => 2 + usize::from(b.identity.is_some()),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, TensorRole)) {
        match &self.mode {
            BlockMode::MultiBranch(b) => {
                f(join(prefix, "dense.weight"), &b.dense.weight, TensorRole::Parameter);
                b.dense.bn.visit(&join(prefix, "dense.bn"), f);
                f(join(prefix, "pointwise.weight"), &b.pointwise.weight, TensorRole::Parameter);
                b.pointwise.bn.visit(&join(prefix, "pointwise.bn"), f);
                if let Some(bn) = &b.identity {
                    bn.visit(&join(prefix, "identity"), f);
                }
            }
            BlockMode::Fused(fc) => {
                f(join(prefix, "fused.weight"), &fc.weight, TensorRole::Parameter);
                f(join(prefix, "fused.bias"), &fc.bias, TensorRole::Parameter);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, TensorRole)) {
        match &mut self.mode {
            BlockMode::MultiBranch(b) => {
                f(join(prefix, "dense.weight"), &mut b.dense.weight, TensorRole::Parameter);
                b.dense.bn.visit_mut(&join(prefix, "dense.bn"), f);
                f(join(prefix, "pointwise.weight"), &mut b.pointwise.weight, TensorRole::Parameter);
                b.pointwise.bn.visit_mut(&join(prefix, "pointwise.bn"), f);
                if let Some(bn) = &mut b.identity {
                    bn.visit_mut(&join(prefix, "identity"), f);
                }
            }
            BlockMode::Fused(fc) => {
                f(join(prefix, "fused.weight"), &mut fc.weight, TensorRole::Parameter);
                f(join(prefix, "fused.bias"), &mut fc.bias, TensorRole::Parameter);
            }
        }
    }

    /// Mutable access to every batch norm, keyed by its name prefix.
    pub fn batch_norms_mut(&mut self, prefix: &str) -> Vec<(String, &mut BatchNorm)> {
        match &mut self.mode {
            BlockMode::Fused(_) => Vec::new(),
            BlockMode::MultiBranch(b) => {
                let mut out = vec![
                    (join(prefix, "dense.bn"), &mut b.dense.bn),
                    (join(prefix, "pointwise.bn"), &mut b.pointwise.bn),
                ];
                if let Some(bn) = &mut b.identity {
                    out.push((join(prefix, "identity"), bn));
                }
                out
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, prefix: &str, ctx: &mut ForwardCtx) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(dim_err("block_forward", Some(1), format!("block expects {} channels, input is {shape:?}", self.in_channels)));
        }
        match &self.mode {
            BlockMode::Fused(fc) => {
                if ctx.training {
                    return Err(Error::Usage(format!("block {prefix} is fused and cannot run in training mode")));
                }
                let w = tape.param(&join(prefix, "fused.weight"), fc.weight.clone())?;
                let b = tape.param(&join(prefix, "fused.bias"), fc.bias.clone())?;
                ctx.block_conv_invocations += 1;
                let y = tape.conv2d(x, w, Some(b), self.stride, 1, 1)?;
                tape.relu(y)
            }
            BlockMode::MultiBranch(br) => {
                let w3 = tape.param(&join(prefix, "dense.weight"), br.dense.weight.clone())?;
                let y3 = tape.conv2d(x, w3, None, self.stride, 1, 1)?;
                let y3 = br.dense.bn.forward(tape, y3, &join(prefix, "dense.bn"), ctx)?;
                let w1 = tape.param(&join(prefix, "pointwise.weight"), br.pointwise.weight.clone())?;
                // unpadded 1×1 samples the same centers as the padded 3×3 at any stride
                let y1 = tape.conv2d(x, w1, None, self.stride, 0, 1)?;
                let y1 = br.pointwise.bn.forward(tape, y1, &join(prefix, "pointwise.bn"), ctx)?;
                ctx.block_conv_invocations += 2;
                let mut sum = tape.add(y3, y1)?;
                if let Some(bn) = &br.identity {
                    let yi = bn.forward(tape, x, &join(prefix, "identity"), ctx)?;
                    ctx.block_conv_invocations += 1;
                    sum = tape.add(sum, yi)?;
                }
                tape.relu(sum)
            }
        }
    }

    /// Folds all branches into one 3×3 convolution with bias.
    pub fn fuse(&self) -> Result<RepVggBlock> {
        let br = match &self.mode {
            BlockMode::Fused(_) => return Err(Error::Usage("block is already fused".into())),
            BlockMode::MultiBranch(b) => b,
        };
        let (o, i) = (self.out_channels, self.in_channels);
        let mut kernel = vec![0.0; o * i * 9];
        let mut bias = vec![0.0; o];

        let (s, t) = br.dense.bn.folded();
        let w = br.dense.weight.data();
        for oc in 0..o {
            for j in 0..i * 9 {
                kernel[oc * i * 9 + j] += w[oc * i * 9 + j] * s[oc];
            }
            bias[oc] += t[oc];
        }

        let (s, t) = br.pointwise.bn.folded();
        let w = br.pointwise.weight.data();
        for oc in 0..o {
            for ic in 0..i {
                kernel[(oc * i + ic) * 9 + 4] += w[oc * i + ic] * s[oc];
            }
            bias[oc] += t[oc];
        }

        if let Some(bn) = &br.identity {
            let (s, t) = bn.folded();
            for c in 0..o {
                kernel[(c * i + c) * 9 + 4] += s[c];
                bias[c] += t[c];
            }
        }

        let dtype = br.dense.weight.dtype();
        Ok(RepVggBlock {
            in_channels: i,
            out_channels: o,
            stride: self.stride,
            mode: BlockMode::Fused(FusedConv {
                weight: Tensor::new(&[o, i, 3, 3], kernel, dtype)?,
                bias: Tensor::new(&[o], bias, dtype)?,
            }),
        })
    }
}
