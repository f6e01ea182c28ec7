//! Latency comparison of multi-branch and fused models.

use std::time::Instant;

use geo_repnet_core::repvgg::ForwardCtx;
use geo_repnet_core::synth::{generate_sample, sample_rng, NUM_CLASSES};
use geo_repnet_core::train::collate;
use geo_repnet_core::{GeoRepNet, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub mean_ms: f64,
    pub min_ms: f64,
    /// Branch convolutions counted from the block structure.
    pub conv_invocations: usize,
    /// Branch convolutions observed during one forward pass.
    pub observed_conv_invocations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iters: usize,
    pub batch: usize,
    pub multi_branch: ModeTiming,
    pub fused: ModeTiming,
    pub max_abs_logit_divergence: f64,
    /// Divergence divided by the largest multi-branch logit magnitude.
    pub max_rel_logit_divergence: f64,
}

fn time_mode(model: &GeoRepNet, rgb: &Tensor, depth: &Tensor, iters: usize) -> Result<(ModeTiming, Tensor)> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::inference();
    let logits = model.forward(&mut tape, rgb, depth, &mut ctx)?;
    let logits = tape.value(logits).clone();
    let (mut total, mut best) = (0.0f64, f64::INFINITY);
    for _ in 0..iters {
        let start = Instant::now();
        model.predict(rgb, depth)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        total += ms;
        best = best.min(ms);
    }
    Ok((
        ModeTiming {
            mean_ms: total / iters as f64,
            min_ms: best,
            conv_invocations: model.conv_invocations(),
            observed_conv_invocations: ctx.block_conv_invocations,
        },
        logits,
    ))
}

/// Times both models on the same seeded synthetic batch.
pub fn bench(multi: &GeoRepNet, fused: &GeoRepNet, iters: usize, batch: usize, seed: u64) -> Result<BenchReport> {
    if iters == 0 || batch == 0 {
        return Err(Error::Usage("iters and batch must be at least 1".into()));
    }
    if multi.config != fused.config {
        return Err(Error::Data("the two checkpoints describe different architectures".into()));
    }
    if multi.is_fused() || !fused.is_fused() {
        return Err(Error::Data("expected one multi-branch and one fused checkpoint".into()));
    }
    let (h, w) = (multi.config.input_height, multi.config.input_width);
    if h != w {
        return Err(Error::Usage(format!("benchmark inputs are square, model expects {h}×{w}")));
    }
    let samples = (0..batch)
        .map(|i| generate_sample(i % NUM_CLASSES, h, &mut sample_rng(seed, u64::MAX, i)))
        .collect::<geo_repnet_core::Result<Vec<_>>>()?;
    let refs: Vec<_> = samples.iter().collect();
    let (rgb, depth, _) = collate(&refs)?;
    let (multi_timing, a) = time_mode(multi, &rgb, &depth, iters)?;
    let (fused_timing, b) = time_mode(fused, &rgb, &depth, iters)?;
    if fused_timing.conv_invocations >= multi_timing.conv_invocations {
        return Err(Error::Data(format!(
            "fused model runs {} convolutions, multi-branch {}",
            fused_timing.conv_invocations, multi_timing.conv_invocations
        )));
    }
    let abs = a.max_abs_diff(&b);
    Ok(BenchReport {
        iters,
        batch,
        multi_branch: multi_timing,
        fused: fused_timing,
        max_abs_logit_divergence: abs,
        max_rel_logit_divergence: abs / a.max_abs().max(f64::MIN_POSITIVE),
    })
}
