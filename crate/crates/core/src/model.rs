//! The assembled classifier: RepVGG backbone, GEMA after the first stage,
//! global average pooling and a linear head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dgpg::{self, DgpgConfig, DgpgParams, Distances};
use crate::error::{dim_err, Error, Result};
use crate::gema::{self, EmaParams, GemaConfig, GemaParams, GsaParams, MaskVars, PriorVars};
use crate::repvgg::{join, ForwardCtx, RepVggBlock, TensorRole, BN_MOMENTUM};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoRepNetConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    /// Adds the depth term to the attention decay mask.
    pub enable_dgpg: bool,
    pub dgpg: DgpgConfig,
    pub gema: GemaConfig,
    pub dtype: DType,
}

impl Default for GeoRepNetConfig {
    fn default() -> Self {
        GeoRepNetConfig {
            input_height: 64,
            input_width: 64,
            in_channels: 3,
            num_classes: 9,
            stage_widths: vec![32, 64, 128, 256],
            stage_depths: vec![1, 2, 4, 1],
            enable_dgpg: true,
            dgpg: DgpgConfig::default(),
            gema: GemaConfig::default(),
            dtype: DType::F64,
        }
    }
}

/// Output size of a padding-1 3×3 convolution.
pub fn conv_out(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

impl GeoRepNetConfig {
    /// Smallest useful configuration, for tests and quick experiments.
    pub fn micro() -> Self {
        GeoRepNetConfig {
            input_height: 32,
            input_width: 32,
            stage_widths: vec![8, 16, 32, 64],
            stage_depths: vec![1, 1, 1, 1],
            dgpg: DgpgConfig {
                num_heads: 2,
                freq_count: 2,
                ..DgpgConfig::default()
            },
            gema: GemaConfig {
                num_heads: 2,
                head_dim: 4,
                ema_factor: 4,
                ..GemaConfig::default()
            },
            ..GeoRepNetConfig::default()
        }
    }

    pub fn gema_enabled(&self) -> bool {
        self.gema.enable_gsa || self.gema.enable_ema
    }

    /// Spatial size of the feature map GEMA sees (after stem and first stage).
    pub fn gema_resolution(&self) -> (usize, usize) {
        (
            conv_out(conv_out(self.input_height, 2), 2),
            conv_out(conv_out(self.input_width, 2), 2),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_depths.len() {
            return Err(Error::Config(format!(
                "stage_widths ({}) and stage_depths ({}) must be non-empty and of equal length",
                self.stage_widths.len(),
                self.stage_depths.len()
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0) || self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("stage widths and depths must be positive".into()));
        }
        if self.gema_enabled() {
            self.gema.validate(self.stage_widths[0])?;
        }
        if self.gema.enable_gsa {
            self.dgpg.validate()?;
            if self.dgpg.num_heads != self.gema.num_heads {
                return Err(Error::Config(format!(
                    "prior heads ({}) must equal attention heads ({})",
                    self.dgpg.num_heads, self.gema.num_heads
                )));
            }
            if 2 * self.dgpg.freq_count != self.gema.head_dim {
                return Err(Error::Config(format!(
                    "head_dim ({}) must be twice freq_count ({})",
                    self.gema.head_dim, self.dgpg.freq_count
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoRepNet {
    pub config: GeoRepNetConfig,
    pub stem: RepVggBlock,
    pub stages: Vec<Vec<RepVggBlock>>,
    pub dgpg: Option<DgpgParams>,
    pub gema: GemaParams,
    pub head: LinearHead,
}

// independent streams so toggling one component leaves the others' init unchanged
const STREAM_BACKBONE: u64 = 1;
const STREAM_GSA: u64 = 2;
const STREAM_EMA: u64 = 3;
const STREAM_HEAD: u64 = 4;

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Values collected per sample by [`GeoRepNet::forward`].
pub struct ForwardOutput {
    pub logits: Var,
    /// Attention logits of the GSA stage, when enabled.
    pub attention_logits: Vec<Var>,
}

impl GeoRepNet {
    pub fn new(config: GeoRepNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype;
        let mut rng = component_rng(seed, STREAM_BACKBONE);
        let w0 = config.stage_widths[0];
        let stem = RepVggBlock::new(config.in_channels, w0, 2, &mut rng, dtype);
        let mut stages = Vec::with_capacity(config.stage_widths.len());
        let mut c_in = w0;
        for (&width, &depth) in config.stage_widths.iter().zip(&config.stage_depths) {
            let mut blocks = Vec::with_capacity(depth);
            for i in 0..depth {
                let stride = if i == 0 { 2 } else { 1 };
                blocks.push(RepVggBlock::new(c_in, width, stride, &mut rng, dtype));
                c_in = width;
            }
            stages.push(blocks);
        }

        let gsa = config
            .gema
            .enable_gsa
            .then(|| GsaParams::init(w0, &mut component_rng(seed, STREAM_GSA), dtype));
        let ema = config.gema.enable_ema.then(|| {
            EmaParams::init(w0 / config.gema.ema_factor, &mut component_rng(seed, STREAM_EMA), dtype)
        });
        let dgpg = config.gema.enable_gsa.then(|| DgpgParams::from_config(&config.dgpg, dtype));

        let mut rng = component_rng(seed, STREAM_HEAD);
        let dist = Normal::new(0.0, libm::sqrt(1.0 / c_in as f64)).expect("positive std");
        let data = (0..config.num_classes * c_in).map(|_| dist.sample(&mut rng)).collect();
        let head = LinearHead {
            weight: Tensor::new(&[config.num_classes, c_in], data, dtype)?,
            bias: Tensor::zeros(&[config.num_classes], dtype),
        };
        Ok(GeoRepNet {
            config,
            stem,
            stages,
            dgpg,
            gema: GemaParams { gsa, ema },
            head,
        })
    }

    /// Every RepVGG block in forward order with its name prefix.
    pub fn blocks(&self) -> Vec<(String, &RepVggBlock)> {
        let mut out = vec![(String::from("stem"), &self.stem)];
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                out.push((format!("stages.{s}.{b}"), block));
            }
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut RepVggBlock)> {
        let mut out = vec![(String::from("stem"), &mut self.stem)];
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                out.push((format!("stages.{s}.{b}"), block));
            }
        }
        out
    }

    pub fn is_fused(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.is_fused())
    }

    /// Visits every stored tensor by its canonical name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor, TensorRole)) {
        for (prefix, block) in self.blocks() {
            block.visit(&prefix, f);
        }
        if let Some(d) = &self.dgpg {
            f("dgpg.lambda0".into(), &d.lambda0, TensorRole::Parameter);
            f("dgpg.gamma".into(), &d.gamma, TensorRole::Parameter);
            f("dgpg.w1_raw".into(), &d.w1_raw, TensorRole::Parameter);
            f("dgpg.w2_raw".into(), &d.w2_raw, TensorRole::Parameter);
        }
        if let Some(g) = &self.gema.gsa {
            for (name, t) in g.tensors() {
                f(join("gema.gsa", name), t, TensorRole::Parameter);
            }
        }
        if let Some(e) = &self.gema.ema {
            for (name, t) in e.tensors() {
                f(join("gema.ema", name), t, TensorRole::Parameter);
            }
        }
        f("head.weight".into(), &self.head.weight, TensorRole::Parameter);
        f("head.bias".into(), &self.head.bias, TensorRole::Parameter);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor, TensorRole)) {
        for (prefix, block) in self.blocks_mut() {
            block.visit_mut(&prefix, f);
        }
        if let Some(d) = &mut self.dgpg {
            f("dgpg.lambda0".into(), &mut d.lambda0, TensorRole::Parameter);
            f("dgpg.gamma".into(), &mut d.gamma, TensorRole::Parameter);
            f("dgpg.w1_raw".into(), &mut d.w1_raw, TensorRole::Parameter);
            f("dgpg.w2_raw".into(), &mut d.w2_raw, TensorRole::Parameter);
        }
        if let Some(g) = &mut self.gema.gsa {
            for (name, t) in g.tensors_mut() {
                f(join("gema.gsa", name), t, TensorRole::Parameter);
            }
        }
        if let Some(e) = &mut self.gema.ema {
            for (name, t) in e.tensors_mut() {
                f(join("gema.ema", name), t, TensorRole::Parameter);
            }
        }
        f("head.weight".into(), &mut self.head.weight, TensorRole::Parameter);
        f("head.bias".into(), &mut self.head.bias, TensorRole::Parameter);
    }

    /// All stored tensors (parameters and statistics) by name.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, t, _| {
            out.insert(name, t.clone());
        });
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, role| {
            if role == TensorRole::Parameter {
                out.push(name);
            }
        });
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, role| {
            if role == TensorRole::Parameter {
                n += t.numel();
            }
        });
        n
    }

    /// Replaces stored tensors from a name map. Every stored tensor must be
    /// present with a matching shape; extra names are rejected.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut seen = 0usize;
        let mut failure: Option<Error> = None;
        let dtype = self.config.dtype;
        self.visit_mut(&mut |name, t, _| {
            if failure.is_some() {
                return;
            }
            match state.get(&name) {
                None => failure = Some(Error::Data(format!("missing tensor {name}"))),
                Some(src) if src.shape() != t.shape() => {
                    failure = Some(Error::Data(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => {
                    *t = src.to_dtype(dtype);
                    seen += 1;
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if seen != state.len() {
            let known = self.state();
            let extra = state.keys().find(|k| !known.contains_key(*k)).cloned().unwrap_or_default();
            return Err(Error::Data(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Structural copy with every block fused into a single 3×3 convolution.
    pub fn reparameterize(&self) -> Result<GeoRepNet> {
        let mut out = self.clone();
        out.stem = self.stem.fuse()?;
        for (dst, src) in out.stages.iter_mut().zip(&self.stages) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s.fuse()?;
            }
        }
        Ok(out)
    }

    fn check_inputs(&self, rgb: &Tensor, depth: &Tensor) -> Result<usize> {
        let c = &self.config;
        let rs = rgb.shape();
        if rs.len() != 4 || rs[1] != c.in_channels || rs[2] != c.input_height || rs[3] != c.input_width {
            return Err(dim_err(
                "model_forward",
                None,
                format!(
                    "rgb must be [B, {}, {}, {}], got {rs:?}",
                    c.in_channels, c.input_height, c.input_width
                ),
            ));
        }
        let ds = depth.shape();
        if ds != [rs[0], 1, rs[2], rs[3]] {
            return Err(dim_err(
                "model_forward",
                None,
                format!("depth must be [{}, 1, {}, {}], got {ds:?}", rs[0], rs[2], rs[3]),
            ));
        }
        if let Some(v) = depth.data().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Data(format!("depth values must be finite and positive, found {v}")));
        }
        Ok(rs[0])
    }

    /// Per-sample depth distances at the GEMA resolution.
    fn depth_distances(&self, depth: &Tensor, batch: usize) -> Result<Vec<Distances>> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let (h1, w1) = self.config.gema_resolution();
        (0..batch)
            .map(|b| {
                let plane = Tensor::new(&[h, w], depth.data()[b * h * w..(b + 1) * h * w].to_vec(), DType::F64)?;
                let resized = dgpg::resize_depth(&plane, h1, w1)?;
                dgpg::depth_distance_matrix(&resized, self.config.dgpg.formulation)
            })
            .collect()
    }

    fn prior_vars(&self, tape: &mut Tape, depth: &Tensor, batch: usize) -> Result<PriorVars> {
        let cfg = &self.config.dgpg;
        let heads = cfg.num_heads;
        let (h1, w1) = self.config.gema_resolution();
        let dg = self.dgpg.as_ref().expect("prior parameters exist with GSA").register(tape, "dgpg")?;
        let (hs, hc) = dgpg::positional_encoding(h1, cfg.freq_count)?;
        let (ws, wc) = dgpg::positional_encoding(w1, cfg.freq_count)?;
        let width_rot = gema::token_tables(&ws, &wc, h1, w1, true, cfg.formulation);
        let height_rot = gema::token_tables(&hs, &hc, h1, w1, false, cfg.formulation);
        let depth_dist = if self.config.enable_dgpg {
            Some(self.depth_distances(depth, batch)?)
        } else {
            None
        };
        let pos = dgpg::position_distance_matrix(h1, w1, cfg.formulation)?;
        let mask = match pos {
            Distances::Full(p) => {
                let d = match &depth_dist {
                    Some(ds) => {
                        let planes: Vec<Tensor> = ds
                            .iter()
                            .map(|d| match d {
                                Distances::Full(t) => t.clone(),
                                Distances::Axial { .. } => unreachable!(),
                            })
                            .collect();
                        Some(Tensor::stack(&planes)?)
                    }
                    None => None,
                };
                MaskVars::Full(dg.mask(tape, heads, &p, d.as_ref())?)
            }
            Distances::Axial { height: ph, width: pw } => {
                let (dh, dw) = match &depth_dist {
                    Some(ds) => {
                        let mut hs = Vec::with_capacity(batch);
                        let mut ws = Vec::with_capacity(batch);
                        for d in ds {
                            match d {
                                Distances::Axial { height, width } => {
                                    hs.push(height.clone());
                                    ws.push(width.clone());
                                }
                                Distances::Full(_) => unreachable!(),
                            }
                        }
                        (Some(Tensor::stack(&hs)?), Some(Tensor::stack(&ws)?))
                    }
                    None => (None, None),
                };
                let rows = dg.mask(tape, heads, &pw, dw.as_ref())?;
                let cols = dg.mask(tape, heads, &ph, dh.as_ref())?;
                let rb = tape.shape(rows)[0];
                let cb = tape.shape(cols)[0];
                MaskVars::Axial {
                    rows: tape.reshape(rows, &[rb, heads, 1, w1, w1])?,
                    cols: tape.reshape(cols, &[cb, heads, 1, h1, h1])?,
                }
            }
        };
        Ok(PriorVars {
            formulation: cfg.formulation,
            resolution: (h1, w1),
            width_rot,
            height_rot,
            mask,
        })
    }

    /// Records a forward pass. `rgb` is `[B, C, H, W]`, `depth` is `[B, 1, H, W]`.
    pub fn forward_traced(&self, tape: &mut Tape, rgb: &Tensor, depth: &Tensor, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        let batch = self.check_inputs(rgb, depth)?;
        let mut x = tape.constant(rgb.to_dtype(self.config.dtype));
        x = self.stem.forward(tape, x, "stem", ctx)?;
        let mut attention_logits = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                x = block.forward(tape, x, &format!("stages.{s}.{b}"), ctx)?;
            }
            if s == 0 && self.config.gema_enabled() {
                let gvars = self.gema.register(tape, "gema")?;
                let prior = if self.config.gema.enable_gsa {
                    Some(self.prior_vars(tape, depth, batch)?)
                } else {
                    None
                };
                if let (Some(p), Some(gsa)) = (&prior, &gvars.gsa) {
                    let trace = gema::cross_gsa(tape, x, p, gsa, &self.config.gema)?;
                    attention_logits = trace.logits;
                    x = trace.output;
                }
                if let Some(ema) = &gvars.ema {
                    x = gema::ema_attention(tape, x, ema, self.config.gema.ema_factor)?;
                }
            }
        }
        let c = tape.shape(x)[1];
        let pooled = tape.mean_axis(x, 3)?;
        let pooled = tape.mean_axis(pooled, 2)?;
        let pooled = tape.reshape(pooled, &[batch, c])?;
        let w = tape.param("head.weight", self.head.weight.clone())?;
        let b = tape.param("head.bias", self.head.bias.clone())?;
        let logits = tape.linear(pooled, w, Some(b))?;
        Ok(ForwardOutput { logits, attention_logits })
    }

    pub fn forward(&self, tape: &mut Tape, rgb: &Tensor, depth: &Tensor, ctx: &mut ForwardCtx) -> Result<Var> {
        Ok(self.forward_traced(tape, rgb, depth, ctx)?.logits)
    }

    /// Inference-mode logits `[B, classes]`.
    pub fn predict(&self, rgb: &Tensor, depth: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::inference();
        let logits = self.forward(&mut tape, rgb, depth, &mut ctx)?;
        Ok(tape.value(logits).clone())
    }

    /// Folds batch statistics recorded during a training pass into the running estimates.
    pub fn apply_bn_updates(&mut self, tape: &Tape, ctx: &ForwardCtx) -> Result<()> {
        let mut stats = BTreeMap::new();
        for (prefix, node) in &ctx.bn_updates {
            let (mean, var) = tape
                .batch_statistics(*node)
                .ok_or_else(|| Error::Usage(format!("node for {prefix} is not a batch norm")))?;
            let shape = tape.shape(*node);
            let count = shape.iter().product::<usize>() / shape[1];
            stats.insert(prefix.clone(), (mean.to_vec(), var.to_vec(), count));
        }
        for (prefix, block) in self.blocks_mut() {
            for (name, bn) in block.batch_norms_mut(&prefix) {
                if let Some((mean, var, count)) = stats.get(&name) {
                    bn.update_running(mean, var, *count, BN_MOMENTUM);
                }
            }
        }
        Ok(())
    }

    /// Total branch convolutions one inference pass evaluates.
    pub fn conv_invocations(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.conv_invocations()).sum()
    }
}

/// Draws a `[B, C, H, W]` tensor of standard normals and a positive depth map,
/// handy for exercising the model without a dataset.
pub fn random_inputs<R: Rng + ?Sized>(config: &GeoRepNetConfig, batch: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
    let (h, w) = (config.input_height, config.input_width);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rgb = (0..batch * config.in_channels * h * w).map(|_| normal.sample(rng)).collect();
    let depth = (0..batch * h * w).map(|_| rng.random_range(0.2..1.0)).collect();
    Ok((
        Tensor::new(&[batch, config.in_channels, h, w], rgb, config.dtype)?,
        Tensor::new(&[batch, 1, h, w], depth, DType::F64)?,
    ))
}
