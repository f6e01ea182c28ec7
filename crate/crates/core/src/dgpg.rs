//! Depth-guided geometric priors.
//!
//! A depth map is turned into two things consumed by the attention block:
//! sinusoidal angular bases per spatial axis, and per-head additive decay
//! masks that attenuate attention between positions that are far apart on
//! the grid or at different depths.
//!
//! Two evaluation routes exist: the plain functions here operate on
//! [`Tensor`]s, while [`DgpgVars::mask`] builds the same mask on a [`Tape`]
//! so the decay and fusion parameters receive gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{softplus, Tape, Var};
use crate::tensor::{DType, Tensor};

/// Base of the geometric frequency ladder.
pub const FREQUENCY_BASE: f64 = 10000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    /// Separate height and width masks; attention runs along rows then columns.
    Axial1d,
    /// One mask over all flattened positions.
    Full2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpgConfig {
    pub num_heads: usize,
    pub lambda0: f64,
    pub gamma: f64,
    pub w1_raw: f64,
    pub w2_raw: f64,
    pub freq_count: usize,
    pub formulation: Formulation,
}

/// `softplus⁻¹(1)`: the raw value that yields a fusion weight of exactly one.
pub fn unit_weight_raw() -> f64 {
    libm::log(core::f64::consts::E - 1.0)
}

impl Default for DgpgConfig {
    fn default() -> Self {
        DgpgConfig {
            num_heads: 4,
            lambda0: 5.0,
            gamma: 3.0,
            w1_raw: unit_weight_raw(),
            w2_raw: unit_weight_raw(),
            freq_count: 4,
            formulation: Formulation::Full2d,
        }
    }
}

impl DgpgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::Config("dgpg num_heads must be at least 1".into()));
        }
        if self.freq_count == 0 {
            return Err(Error::Config("dgpg freq_count must be at least 1".into()));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Config(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if !self.w1_raw.is_finite() || !self.w2_raw.is_finite() {
            return Err(Error::Config("fusion weights must be finite".into()));
        }
        Ok(())
    }

    pub fn w1(&self) -> f64 {
        softplus(self.w1_raw)
    }

    pub fn w2(&self) -> f64 {
        softplus(self.w2_raw)
    }
}

/// `ln(1 − 2^−(λ0 + γ·h/H))` for head `h` of `H`.
pub fn decay_factor(head: usize, cfg: &DgpgConfig) -> Result<f64> {
    cfg.validate()?;
    if head >= cfg.num_heads {
        return Err(Error::Config(format!("head {head} outside 0..{}", cfg.num_heads)));
    }
    Ok(decay_value(cfg.lambda0, cfg.gamma, head, cfg.num_heads))
}

fn decay_value(lambda0: f64, gamma: f64, head: usize, heads: usize) -> f64 {
    let exponent = lambda0 + gamma * head as f64 / heads as f64;
    libm::log1p(-libm::exp2(-exponent))
}

/// Angular frequencies `ω_k = base^(−2k / (2·freq_count))`.
pub fn frequencies(freq_count: usize) -> Vec<f64> {
    (0..freq_count)
        .map(|k| libm::pow(FREQUENCY_BASE, -(2.0 * k as f64) / (2.0 * freq_count as f64)))
        .collect()
}

/// `(sin(i·ω_k), cos(i·ω_k))`, each shaped `[axis_length, freq_count]`.
pub fn positional_encoding(axis_length: usize, freq_count: usize) -> Result<(Tensor, Tensor)> {
    if axis_length == 0 || freq_count == 0 {
        return Err(Error::Config("positional encoding needs positive sizes".into()));
    }
    let omega = frequencies(freq_count);
    let mut sin = Vec::with_capacity(axis_length * freq_count);
    let mut cos = Vec::with_capacity(axis_length * freq_count);
    for i in 0..axis_length {
        for w in &omega {
            let angle = i as f64 * w;
            sin.push(libm::sin(angle));
            cos.push(libm::cos(angle));
        }
    }
    let shape = [axis_length, freq_count];
    Ok((Tensor::from_f64(&shape, sin)?, Tensor::from_f64(&shape, cos)?))
}

/// Pairwise distances, either over all flattened positions or per axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Distances {
    Full(Tensor),
    Axial { height: Tensor, width: Tensor },
}

fn pairwise_abs(values: &[f64]) -> Result<Tensor> {
    let n = values.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (values[i] - values[j]).abs();
        }
    }
    Tensor::from_f64(&[n, n], out)
}

/// Grid distance between positions: Euclidean for full-2d, index offset per axis for axial-1d.
pub fn position_distance_matrix(h1: usize, w1: usize, formulation: Formulation) -> Result<Distances> {
    match formulation {
        Formulation::Full2d => {
            let l = h1 * w1;
            let mut out = vec![0.0; l * l];
            for i in 0..l {
                for j in 0..l {
                    let dy = (i / w1) as f64 - (j / w1) as f64;
                    let dx = (i % w1) as f64 - (j % w1) as f64;
                    out[i * l + j] = libm::sqrt(dy * dy + dx * dx);
                }
            }
            Ok(Distances::Full(Tensor::from_f64(&[l, l], out)?))
        }
        Formulation::Axial1d => {
            let idx = |n: usize| (0..n).map(|i| i as f64).collect::<Vec<_>>();
            Ok(Distances::Axial {
                height: pairwise_abs(&idx(h1))?,
                width: pairwise_abs(&idx(w1))?,
            })
        }
    }
}

/// `|d_i − d_j|` over flattened positions, or over row/column mean depths.
pub fn depth_distance_matrix(depth: &Tensor, formulation: Formulation) -> Result<Distances> {
    let shape = depth.shape();
    if shape.len() != 2 {
        return Err(crate::error::dim_err("depth_distance_matrix", None, format!("expected [H, W], got {shape:?}")));
    }
    check_depth(depth.data())?;
    let (h, w) = (shape[0], shape[1]);
    let d = depth.data();
    match formulation {
        Formulation::Full2d => Ok(Distances::Full(pairwise_abs(d)?)),
        Formulation::Axial1d => {
            let rows: Vec<f64> = (0..h).map(|y| d[y * w..(y + 1) * w].iter().sum::<f64>() / w as f64).collect();
            let cols: Vec<f64> = (0..w).map(|x| (0..h).map(|y| d[y * w + x]).sum::<f64>() / h as f64).collect();
            Ok(Distances::Axial {
                height: pairwise_abs(&rows)?,
                width: pairwise_abs(&cols)?,
            })
        }
    }
}

pub(crate) fn check_depth(values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Data(format!("depth value {} at index {i} is not finite and positive", values[i])));
    }
    Ok(())
}

/// `M[h] = w1·decay(h)·pos + w2·decay(h)·depth`, shaped `[heads, n, n]`.
pub fn geometry_mask(pos_dist: &Tensor, depth_dist: &Tensor, cfg: &DgpgConfig) -> Result<Tensor> {
    cfg.validate()?;
    if pos_dist.shape() != depth_dist.shape() || pos_dist.rank() != 2 || pos_dist.shape()[0] != pos_dist.shape()[1] {
        return Err(crate::error::dim_err(
            "geometry_mask",
            None,
            format!("position {:?} vs depth {:?}", pos_dist.shape(), depth_dist.shape()),
        ));
    }
    let n = pos_dist.shape()[0];
    let (w1, w2) = (cfg.w1(), cfg.w2());
    let mut out = Vec::with_capacity(cfg.num_heads * n * n);
    for h in 0..cfg.num_heads {
        let decay = decay_value(cfg.lambda0, cfg.gamma, h, cfg.num_heads);
        for (p, d) in pos_dist.data().iter().zip(depth_dist.data()) {
            out.push(w1 * decay * p + w2 * decay * d);
        }
    }
    Tensor::from_f64(&[cfg.num_heads, n, n], out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecayMask {
    /// `[heads, H1·W1, H1·W1]`
    Full(Tensor),
    /// `[heads, H1, H1]` and `[heads, W1, W1]`
    Axial { height: Tensor, width: Tensor },
}

/// Angular bases per axis plus per-head decay masks at the feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricPrior {
    pub height_sin: Tensor,
    pub height_cos: Tensor,
    pub width_sin: Tensor,
    pub width_cos: Tensor,
    pub decay_mask: DecayMask,
    pub resolution: (usize, usize),
}

/// Bilinearly resizes a `[H, W]` depth map to `[h1, w1]`.
pub fn resize_depth(depth: &Tensor, h1: usize, w1: usize) -> Result<Tensor> {
    if depth.rank() != 2 {
        return Err(crate::error::dim_err("resize_depth", None, format!("expected [H, W], got {:?}", depth.shape())));
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let out = kernels::bilinear_resize(depth.data(), 1, h, w, h1, w1);
    Tensor::new(&[h1, w1], out, depth.dtype())
}

/// Full prior pipeline: resize, angular bases, distances, decay masks.
pub fn generate_priors(depth: &Tensor, h1: usize, w1: usize, cfg: &DgpgConfig) -> Result<GeometricPrior> {
    cfg.validate()?;
    check_depth(depth.data())?;
    let resized = resize_depth(depth, h1, w1)?;
    let depth_dist = depth_distance_matrix(&resized, cfg.formulation)?;
    build_prior(h1, w1, cfg, Some(depth_dist))
}

/// Priors with the depth term removed, used when depth guidance is disabled.
pub fn positional_priors(h1: usize, w1: usize, cfg: &DgpgConfig) -> Result<GeometricPrior> {
    cfg.validate()?;
    build_prior(h1, w1, cfg, None)
}

fn build_prior(h1: usize, w1: usize, cfg: &DgpgConfig, depth_dist: Option<Distances>) -> Result<GeometricPrior> {
    let (height_sin, height_cos) = positional_encoding(h1, cfg.freq_count)?;
    let (width_sin, width_cos) = positional_encoding(w1, cfg.freq_count)?;
    let pos = position_distance_matrix(h1, w1, cfg.formulation)?;
    let zero_like = |t: &Tensor| Tensor::zeros(t.shape(), DType::F64);
    let decay_mask = match (pos, depth_dist) {
        (Distances::Full(p), Some(Distances::Full(d))) => DecayMask::Full(geometry_mask(&p, &d, cfg)?),
        (Distances::Full(p), None) => DecayMask::Full(geometry_mask(&p, &zero_like(&p), cfg)?),
        (Distances::Axial { height: ph, width: pw }, Some(Distances::Axial { height: dh, width: dw })) => DecayMask::Axial {
            height: geometry_mask(&ph, &dh, cfg)?,
            width: geometry_mask(&pw, &dw, cfg)?,
        },
        (Distances::Axial { height: ph, width: pw }, None) => DecayMask::Axial {
            height: geometry_mask(&ph, &zero_like(&ph), cfg)?,
            width: geometry_mask(&pw, &zero_like(&pw), cfg)?,
        },
        _ => unreachable!("distances share one formulation"),
    };
    Ok(GeometricPrior {
        height_sin,
        height_cos,
        width_sin,
        width_cos,
        decay_mask,
        resolution: (h1, w1),
    })
}

/// Learnable prior parameters, each a one-element tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DgpgParams {
    pub lambda0: Tensor,
    pub gamma: Tensor,
    pub w1_raw: Tensor,
    pub w2_raw: Tensor,
}

impl DgpgParams {
    pub fn from_config(cfg: &DgpgConfig, dtype: DType) -> Self {
        DgpgParams {
            lambda0: Tensor::scalar(cfg.lambda0, dtype),
            gamma: Tensor::scalar(cfg.gamma, dtype),
            w1_raw: Tensor::scalar(cfg.w1_raw, dtype),
            w2_raw: Tensor::scalar(cfg.w2_raw, dtype),
        }
    }

    /// Writes the current parameter values back into a config.
    pub fn to_config(&self, template: &DgpgConfig) -> DgpgConfig {
        DgpgConfig {
            lambda0: self.lambda0.item(),
            gamma: self.gamma.item(),
            w1_raw: self.w1_raw.item(),
            w2_raw: self.w2_raw.item(),
            ..template.clone()
        }
    }

    /// Keeps `λ0 > 0` and `γ ≥ 0` after an unconstrained optimizer step.
    pub fn project(&mut self) {
        let l = self.lambda0.item().max(LAMBDA0_FLOOR);
        self.lambda0.set(0, l);
        let g = self.gamma.item().max(0.0);
        self.gamma.set(0, g);
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Result<DgpgVars> {
        Ok(DgpgVars {
            lambda0: tape.param(&format!("{prefix}.lambda0"), self.lambda0.clone())?,
            gamma: tape.param(&format!("{prefix}.gamma"), self.gamma.clone())?,
            w1_raw: tape.param(&format!("{prefix}.w1_raw"), self.w1_raw.clone())?,
            w2_raw: tape.param(&format!("{prefix}.w2_raw"), self.w2_raw.clone())?,
        })
    }
}

/// Smallest admissible `λ0` after projection.
pub const LAMBDA0_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct DgpgVars {
    pub lambda0: Var,
    pub gamma: Var,
    pub w1_raw: Var,
    pub w2_raw: Var,
}

impl DgpgVars {
    /// Per-head decay factors as a `[heads]` tape value.
    pub fn decay(&self, tape: &mut Tape, heads: usize) -> Result<Var> {
        let ratios = Tensor::from_f64(&[heads], (0..heads).map(|h| h as f64 / heads as f64).collect())?;
        let ratios = tape.constant(ratios);
        let scaled = tape.mul(self.gamma, ratios)?;
        let exponent = tape.add(self.lambda0, scaled)?;
        // 2^-x = exp(-x ln 2)
        let neg = tape.scale(exponent, -core::f64::consts::LN_2)?;
        let pow = tape.exp(neg)?;
        let inner = tape.affine(pow, -1.0, 1.0)?;
        tape.ln(inner)
    }

    /// Decay mask on the tape.
    ///
    /// `pos` is `[n, n]`; `depth`, when present, is `[B, n, n]`. The result is
    /// `[B, heads, n, n]` with depth, or `[1, heads, n, n]` without.
    pub fn mask(&self, tape: &mut Tape, heads: usize, pos: &Tensor, depth: Option<&Tensor>) -> Result<Var> {
        let n = pos.shape()[0];
        let decay = self.decay(tape, heads)?;
        let decay = tape.reshape(decay, &[1, heads, 1, 1])?;
        let w1 = tape.softplus(self.w1_raw)?;
        let w1 = tape.reshape(w1, &[1, 1, 1, 1])?;
        let pos = tape.constant(pos.reshape(&[1, 1, n, n])?);
        let pos_coeff = tape.mul(w1, decay)?;
        let pos_term = tape.mul(pos_coeff, pos)?;
        match depth {
            None => Ok(pos_term),
            Some(d) => {
                let b = d.shape()[0];
                let d = tape.constant(d.reshape(&[b, 1, n, n])?);
                let w2 = tape.softplus(self.w2_raw)?;
                let w2 = tape.reshape(w2, &[1, 1, 1, 1])?;
                let depth_coeff = tape.mul(w2, decay)?;
                let depth_term = tape.mul(depth_coeff, d)?;
                tape.add(pos_term, depth_term)
            }
        }
    }
}
