//! Geometry-enhanced multi-scale attention.
//!
//! Two stages applied in sequence to a `[B, C, H, W]` feature map:
//!
//! * geometry-aware self-attention: pre-normalized tokens are projected to
//!   queries, keys and values; queries and keys are rotated once with the
//!   width-axis angular basis and once with the height-axis basis, the two
//!   dot-product maps are summed, scaled by `1/√d_k` and biased with the
//!   per-head decay mask before the softmax. Values pass through a depthwise
//!   3×3 convolution. The projected result is added back to the input.
//! * multi-scale gating: channels are split into groups, pooled along each
//!   spatial axis, mixed by 1×1 and 3×3 convolutions and group-normalized,
//!   then squashed by a sigmoid into a gate that multiplies the input.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dgpg::{DecayMask, Formulation, GeometricPrior};
use crate::error::{dim_err, Error, Result};
use crate::tape::{NormMode, Tape, Var};
use crate::tensor::{DType, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const EMA_FACTORS: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GemaConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub ema_factor: usize,
    pub enable_gsa: bool,
    pub enable_ema: bool,
}

impl Default for GemaConfig {
    fn default() -> Self {
        GemaConfig {
            num_heads: 4,
            head_dim: 8,
            ema_factor: 4,
            enable_gsa: true,
            enable_ema: true,
        }
    }
}

impl GemaConfig {
    pub fn channels(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("attention needs at least one head of positive size".into()));
        }
        if self.channels() != channels {
            return Err(Error::Config(format!(
                "{} heads x {} dims != {channels} feature channels",
                self.num_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim {} must be even for the rotary transform", self.head_dim)));
        }
        if !EMA_FACTORS.contains(&self.ema_factor) {
            return Err(Error::Config(format!("ema_factor {} not in {EMA_FACTORS:?}", self.ema_factor)));
        }
        if channels % self.ema_factor != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by ema_factor {}", self.ema_factor)));
        }
        Ok(())
    }
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64, dtype: DType) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data, dtype).expect("finite samples")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GsaParams {
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub dw_kernel: Tensor,
    pub dw_bias: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl GsaParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R, dtype: DType) -> Self {
        let c = channels;
        let proj_std = 1.0 / libm::sqrt(c as f64);
        GsaParams {
            norm_scale: Tensor::ones(&[c], dtype),
            norm_shift: Tensor::zeros(&[c], dtype),
            wq: normal_tensor(rng, &[c, c], proj_std, dtype),
            bq: Tensor::zeros(&[c], dtype),
            wk: normal_tensor(rng, &[c, c], proj_std, dtype),
            bk: Tensor::zeros(&[c], dtype),
            wv: normal_tensor(rng, &[c, c], proj_std, dtype),
            bv: Tensor::zeros(&[c], dtype),
            dw_kernel: normal_tensor(rng, &[c, 1, 3, 3], libm::sqrt(2.0 / 9.0), dtype),
            dw_bias: Tensor::zeros(&[c], dtype),
            wo: normal_tensor(rng, &[c, c], proj_std, dtype),
            bo: Tensor::zeros(&[c], dtype),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("norm.scale", &self.norm_scale),
            ("norm.shift", &self.norm_shift),
            ("q.weight", &self.wq),
            ("q.bias", &self.bq),
            ("k.weight", &self.wk),
            ("k.bias", &self.bk),
            ("v.weight", &self.wv),
            ("v.bias", &self.bv),
            ("v_dw.weight", &self.dw_kernel),
            ("v_dw.bias", &self.dw_bias),
            ("o.weight", &self.wo),
            ("o.bias", &self.bo),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("norm.scale", &mut self.norm_scale),
            ("norm.shift", &mut self.norm_shift),
            ("q.weight", &mut self.wq),
            ("q.bias", &mut self.bq),
            ("k.weight", &mut self.wk),
            ("k.bias", &mut self.bk),
            ("v.weight", &mut self.wv),
            ("v.bias", &mut self.bv),
            ("v_dw.weight", &mut self.dw_kernel),
            ("v_dw.bias", &mut self.dw_bias),
            ("o.weight", &mut self.wo),
            ("o.bias", &mut self.bo),
        ]
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Result<GsaVars> {
        let mut reg = |name: &str, t: &Tensor| tape.param(&format!("{prefix}.{name}"), t.clone());
        Ok(GsaVars {
            norm_scale: reg("norm.scale", &self.norm_scale)?,
            norm_shift: reg("norm.shift", &self.norm_shift)?,
            wq: reg("q.weight", &self.wq)?,
            bq: reg("q.bias", &self.bq)?,
            wk: reg("k.weight", &self.wk)?,
            bk: reg("k.bias", &self.bk)?,
            wv: reg("v.weight", &self.wv)?,
            bv: reg("v.bias", &self.bv)?,
            dw_kernel: reg("v_dw.weight", &self.dw_kernel)?,
            dw_bias: reg("v_dw.bias", &self.dw_bias)?,
            wo: reg("o.weight", &self.wo)?,
            bo: reg("o.bias", &self.bo)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GsaVars {
    pub norm_scale: Var,
    pub norm_shift: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub dw_kernel: Var,
    pub dw_bias: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Convolutions carry no bias: the per-channel normalization that follows cancels it.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaParams {
    pub conv1_weight: Tensor,
    pub conv3_weight: Tensor,
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
}

impl EmaParams {
    /// Parameters act on `group_channels = C / factor` channels and are shared across groups.
    pub fn init<R: Rng + ?Sized>(group_channels: usize, rng: &mut R, dtype: DType) -> Self {
        let c = group_channels;
        EmaParams {
            conv1_weight: normal_tensor(rng, &[c, c, 1, 1], 1.0 / libm::sqrt(c as f64), dtype),
            conv3_weight: normal_tensor(rng, &[c, c, 3, 3], 1.0 / libm::sqrt(9.0 * c as f64), dtype),
            norm_scale: Tensor::ones(&[c], dtype),
            norm_shift: Tensor::zeros(&[c], dtype),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("conv1.weight", &self.conv1_weight),
            ("conv3.weight", &self.conv3_weight),
            ("norm.scale", &self.norm_scale),
            ("norm.shift", &self.norm_shift),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("conv1.weight", &mut self.conv1_weight),
            ("conv3.weight", &mut self.conv3_weight),
            ("norm.scale", &mut self.norm_scale),
            ("norm.shift", &mut self.norm_shift),
        ]
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Result<EmaVars> {
        let mut reg = |name: &str, t: &Tensor| tape.param(&format!("{prefix}.{name}"), t.clone());
        Ok(EmaVars {
            conv1_weight: reg("conv1.weight", &self.conv1_weight)?,
            conv3_weight: reg("conv3.weight", &self.conv3_weight)?,
            norm_scale: reg("norm.scale", &self.norm_scale)?,
            norm_shift: reg("norm.shift", &self.norm_shift)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmaVars {
    pub conv1_weight: Var,
    pub conv3_weight: Var,
    pub norm_scale: Var,
    pub norm_shift: Var,
}

/// Per-token rotation tables and mask handles for one forward pass.
#[derive(Clone, Debug)]
pub struct PriorVars {
    pub formulation: Formulation,
    pub resolution: (usize, usize),
    /// Width-axis angles per token: `cos`, `sin`, each `[tokens, head_dim/2]`.
    pub width_rot: (Vec<f64>, Vec<f64>),
    /// Height-axis angles per token.
    pub height_rot: (Vec<f64>, Vec<f64>),
    pub mask: MaskVars,
}

#[derive(Clone, Copy, Debug)]
pub enum MaskVars {
    /// `[B or 1, heads, L, L]`
    Full(Var),
    /// `[B or 1, heads, 1, W, W]` for rows and `[B or 1, heads, 1, H, H]` for columns.
    Axial { rows: Var, cols: Var },
}

/// Expands per-axis `[len, F]` tables into per-token tables.
///
/// For full-2d tokens are the flattened grid; for axial-1d they are the
/// positions along the axis itself.
pub fn token_tables(prior_sin: &Tensor, prior_cos: &Tensor, h1: usize, w1: usize, axis_is_width: bool, formulation: Formulation) -> (Vec<f64>, Vec<f64>) {
    let f = prior_sin.shape()[1];
    match formulation {
        Formulation::Axial1d => (prior_cos.data().to_vec(), prior_sin.data().to_vec()),
        Formulation::Full2d => {
            let mut cos = Vec::with_capacity(h1 * w1 * f);
            let mut sin = Vec::with_capacity(h1 * w1 * f);
            for y in 0..h1 {
                for x in 0..w1 {
                    let p = if axis_is_width { x } else { y };
                    cos.extend_from_slice(&prior_cos.data()[p * f..(p + 1) * f]);
                    sin.extend_from_slice(&prior_sin.data()[p * f..(p + 1) * f]);
                }
            }
            (cos, sin)
        }
    }
}

impl PriorVars {
    /// Places a precomputed prior (fixed masks, no gradient) on the tape.
    pub fn from_prior(tape: &mut Tape, prior: &GeometricPrior) -> Result<PriorVars> {
        let (h1, w1) = prior.resolution;
        let formulation = match prior.decay_mask {
            DecayMask::Full(_) => Formulation::Full2d,
            DecayMask::Axial { .. } => Formulation::Axial1d,
        };
        let width_rot = token_tables(&prior.width_sin, &prior.width_cos, h1, w1, true, formulation);
        let height_rot = token_tables(&prior.height_sin, &prior.height_cos, h1, w1, false, formulation);
        let mask = match &prior.decay_mask {
            DecayMask::Full(m) => {
                let s = m.shape();
                MaskVars::Full(tape.constant(m.reshape(&[1, s[0], s[1], s[2]])?))
            }
            DecayMask::Axial { height, width } => {
                let (hs, ws) = (height.shape(), width.shape());
                MaskVars::Axial {
                    rows: tape.constant(width.reshape(&[1, ws[0], 1, ws[1], ws[2]])?),
                    cols: tape.constant(height.reshape(&[1, hs[0], 1, hs[1], hs[2]])?),
                }
            }
        };
        Ok(PriorVars {
            formulation,
            resolution: (h1, w1),
            width_rot,
            height_rot,
            mask,
        })
    }
}

/// Pure rotary transform of `x[..., tokens, head_dim]` with angles `position·ω_k`
/// taken from `pe_sin`/`pe_cos` rows (one row per token).
pub fn rotary_transform(x: &Tensor, pe_sin: &Tensor, pe_cos: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let d = *shape.last().unwrap();
    if d % 2 != 0 {
        return Err(Error::Config(format!("head_dim {d} must be even")));
    }
    if shape.len() < 2 || pe_sin.shape() != [shape[shape.len() - 2], d / 2] || pe_cos.shape() != pe_sin.shape() {
        return Err(dim_err("rotary_transform", Some(shape.len().saturating_sub(2)), format!("tables {:?} for input {shape:?}", pe_sin.shape())));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.rotary(v, pe_cos.data(), pe_sin.data())?;
    Ok(tape.value(out).clone())
}

/// Tape values produced by one attention pass, kept for inspection.
#[derive(Clone, Debug)]
pub struct GsaTrace {
    pub output: Var,
    /// Pre-softmax logits: one entry for full-2d, rows then columns for axial-1d.
    pub logits: Vec<Var>,
    pub attention: Vec<Var>,
}

fn split_heads(tape: &mut Tape, t: Var, b: usize, l: usize, heads: usize, dk: usize) -> Result<Var> {
    let t = tape.reshape(t, &[b, l, heads, dk])?;
    tape.permute(t, &[0, 2, 1, 3])
}

/// Geometry-aware self-attention with residual connection.
pub fn cross_gsa(tape: &mut Tape, x: Var, prior: &PriorVars, p: &GsaVars, cfg: &GemaConfig) -> Result<GsaTrace> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(dim_err("cross_gsa", None, format!("expected [B, C, H, W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    cfg.validate(c)?;
    if prior.resolution != (h, w) {
        return Err(dim_err("cross_gsa", Some(2), format!("prior resolution {:?} vs features {:?}", prior.resolution, (h, w))));
    }
    let (heads, dk) = (cfg.num_heads, cfg.head_dim);
    let l = h * w;
    let scale = 1.0 / libm::sqrt(dk as f64);

    let tokens = tape.permute(x, &[0, 2, 3, 1])?;
    let tokens = tape.reshape(tokens, &[b, l, c])?;
    let normed = tape.normalize(tokens, NormMode::Layer, p.norm_scale, p.norm_shift, NORM_EPS)?;
    let q = tape.linear(normed, p.wq, Some(p.bq))?;
    let k = tape.linear(normed, p.wk, Some(p.bk))?;
    let v = tape.linear(normed, p.wv, Some(p.bv))?;
    let v = tape.reshape(v, &[b, h, w, c])?;
    let v = tape.permute(v, &[0, 3, 1, 2])?;
    let v = tape.conv2d(v, p.dw_kernel, Some(p.dw_bias), 1, 1, c)?;
    let v = tape.permute(v, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, &[b, l, c])?;

    let q = split_heads(tape, q, b, l, heads, dk)?;
    let k = split_heads(tape, k, b, l, heads, dk)?;
    let v = split_heads(tape, v, b, l, heads, dk)?;

    let (wc, ws) = (&prior.width_rot.0, &prior.width_rot.1);
    let (hc, hs) = (&prior.height_rot.0, &prior.height_rot.1);
    let mut logits = Vec::new();
    let mut attention = Vec::new();

    let mixed = match (prior.formulation, prior.mask) {
        (Formulation::Full2d, MaskVars::Full(mask)) => {
            let qx = tape.rotary(q, wc, ws)?;
            let kx = tape.rotary(k, wc, ws)?;
            let qy = tape.rotary(q, hc, hs)?;
            let ky = tape.rotary(k, hc, hs)?;
            let sx = tape.matmul(qx, kx, true)?;
            let sy = tape.matmul(qy, ky, true)?;
            let s = tape.add(sx, sy)?;
            let s = tape.scale(s, scale)?;
            let s = tape.add(s, mask)?;
            let a = tape.softmax(s, 3)?;
            logits.push(s);
            attention.push(a);
            tape.matmul(a, v, false)?
        }
        (Formulation::Axial1d, MaskVars::Axial { rows, cols }) => {
            // rows: tokens along width
            let q5 = tape.reshape(q, &[b, heads, h, w, dk])?;
            let k5 = tape.reshape(k, &[b, heads, h, w, dk])?;
            let v5 = tape.reshape(v, &[b, heads, h, w, dk])?;
            let qx = tape.rotary(q5, wc, ws)?;
            let kx = tape.rotary(k5, wc, ws)?;
            let sr = tape.matmul(qx, kx, true)?;
            let sr = tape.scale(sr, scale)?;
            let sr = tape.add(sr, rows)?;
            let ar = tape.softmax(sr, 4)?;
            let vr = tape.matmul(ar, v5, false)?;
            // columns: tokens along height
            let qt = tape.permute(q5, &[0, 1, 3, 2, 4])?;
            let kt = tape.permute(k5, &[0, 1, 3, 2, 4])?;
            let vt = tape.permute(vr, &[0, 1, 3, 2, 4])?;
            let qy = tape.rotary(qt, hc, hs)?;
            let ky = tape.rotary(kt, hc, hs)?;
            let sc = tape.matmul(qy, ky, true)?;
            let sc = tape.scale(sc, scale)?;
            let sc = tape.add(sc, cols)?;
            let ac = tape.softmax(sc, 4)?;
            let vc = tape.matmul(ac, vt, false)?;
            let vc = tape.permute(vc, &[0, 1, 3, 2, 4])?;
            logits.extend([sr, sc]);
            attention.extend([ar, ac]);
            tape.reshape(vc, &[b, heads, l, dk])?
        }
        _ => return Err(Error::Config("prior mask does not match its formulation".into())),
    };

    let merged = tape.permute(mixed, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[b, l, c])?;
    let projected = tape.linear(merged, p.wo, Some(p.bo))?;
    let projected = tape.reshape(projected, &[b, h, w, c])?;
    let projected = tape.permute(projected, &[0, 3, 1, 2])?;
    let output = tape.add(x, projected)?;
    Ok(GsaTrace { output, logits, attention })
}

/// Grouped directional-pooling gate; returns `x ⊙ σ(Z)`.
pub fn ema_attention(tape: &mut Tape, x: Var, p: &EmaVars, factor: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(dim_err("ema_attention", None, format!("expected [B, C, H, W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if factor == 0 || c % factor != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by factor {factor}")));
    }
    let gc = c / factor;
    let grouped = tape.reshape(x, &[b * factor, gc, h, w])?;
    let pooled_h = tape.mean_axis(grouped, 3)?;
    let pooled_w = tape.mean_axis(grouped, 2)?;
    let pooled_w = tape.permute(pooled_w, &[0, 1, 3, 2])?;
    let strip = tape.concat(&[pooled_h, pooled_w], 2)?;
    let mixed = tape.conv2d(strip, p.conv1_weight, None, 1, 0, 1)?;
    let zh = tape.narrow(mixed, 2, 0, h)?;
    let zw = tape.narrow(mixed, 2, h, w)?;
    let zw = tape.permute(zw, &[0, 1, 3, 2])?;
    let spatial = tape.add(zh, zw)?;
    let padded = tape.pad_replicate(spatial, 1)?;
    let z = tape.conv2d(padded, p.conv3_weight, None, 1, 0, 1)?;
    let z = tape.normalize(z, NormMode::Group(gc), p.norm_scale, p.norm_shift, NORM_EPS)?;
    let gate = tape.sigmoid(z)?;
    let out = tape.mul(grouped, gate)?;
    tape.reshape(out, &[b, c, h, w])
}

#[derive(Clone, Debug, PartialEq)]
pub struct GemaParams {
    pub gsa: Option<GsaParams>,
    pub ema: Option<EmaParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct GemaVars {
    pub gsa: Option<GsaVars>,
    pub ema: Option<EmaVars>,
}

impl GemaParams {
    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Result<GemaVars> {
        Ok(GemaVars {
            gsa: self.gsa.as_ref().map(|g| g.register(tape, &format!("{prefix}.gsa"))).transpose()?,
            ema: self.ema.as_ref().map(|e| e.register(tape, &format!("{prefix}.ema"))).transpose()?,
        })
    }
}

/// Attention then gating; a disabled stage is the identity.
pub fn gema_forward(tape: &mut Tape, f1: Var, prior: Option<&PriorVars>, p: &GemaVars, cfg: &GemaConfig) -> Result<Var> {
    let mut x = f1;
    if cfg.enable_gsa {
        let gsa = p.gsa.as_ref().ok_or_else(|| Error::Config("attention enabled without parameters".into()))?;
        let prior = prior.ok_or_else(|| Error::Config("attention enabled without geometric priors".into()))?;
        x = cross_gsa(tape, x, prior, gsa, cfg)?.output;
    }
    if cfg.enable_ema {
        let ema = p.ema.as_ref().ok_or_else(|| Error::Config("gating enabled without parameters".into()))?;
        x = ema_attention(tape, x, ema, cfg.ema_factor)?;
    }
    Ok(x)
}
