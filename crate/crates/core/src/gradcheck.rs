//! Central-difference verification of tape gradients.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{random_inputs, GeoRepNet, GeoRepNetConfig};
use crate::repvgg::ForwardCtx;
use crate::tape::{BackwardFault, Tape, Var};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Entries sampled per parameter tensor (all entries when the tensor is smaller).
    pub samples_per_tensor: usize,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub seed: u64,
    /// Corrupts the analytic pass, for negative controls.
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            samples_per_tensor: 4,
            abs_floor: 1e-8,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Entries dropped because a ReLU changed sides within the stencil.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic and central-difference gradients of the scalar built by `eval`.
///
/// `eval` receives the full parameter map and must record the loss on a fresh tape,
/// registering each parameter under its map key.
pub fn check_gradients<F>(params: &BTreeMap<String, Tensor>, mut eval: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<(Tape, Var)>,
{
    if params.values().any(|t| t.dtype() != DType::F64) {
        return Err(Error::Usage("gradient checks need f64 parameters".into()));
    }
    let (mut tape, loss) = eval(params)?;
    if let Some(f) = cfg.fault {
        tape.inject_fault(f);
    }
    let analytic = tape.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (name, grad) in &analytic {
        let n = grad.numel();
        let indices: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            (0..cfg.samples_per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for index in indices {
            let base = params[name].data()[index];
            probe.get_mut(name).expect("gradient names are parameter names").set(index, base + cfg.step);
            let (tp, lp) = eval(&probe)?;
            probe.get_mut(name).expect("present").set(index, base - cfg.step);
            let (tm, lm) = eval(&probe)?;
            probe.get_mut(name).expect("present").set(index, base);
            if tp.relu_pattern() != tm.relu_pattern() {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * cfg.step);
            let a = grad.data()[index];
            report.entries.push(GradCheckEntry {
                name: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, cfg.abs_floor),
            });
        }
    }
    Ok(report)
}

/// Gradient check of the full classifier under a training-mode cross-entropy loss.
pub fn check_model(model: &GeoRepNet, rgb: &Tensor, depth: &Tensor, labels: &[usize], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut scratch = model.clone();
    let state = model.state();
    check_gradients(
        &state,
        |s| {
            scratch.load_state(s)?;
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::training();
            let logits = scratch.forward(&mut tape, rgb, depth, &mut ctx)?;
            let loss = tape.cross_entropy(logits, labels, None)?;
            Ok((tape, loss))
        },
        cfg,
    )
}

/// Gradient check of a freshly initialised model on seeded random inputs.
///
/// Uses a batch of four so batch-norm statistics stay non-degenerate in the
/// deepest stage.
pub fn check_config(config: &GeoRepNetConfig, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if config.dtype != DType::F64 {
        return Err(Error::Usage("gradient checks need a double-precision model".into()));
    }
    let model = GeoRepNet::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let (rgb, depth) = random_inputs(config, 4, &mut rng)?;
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..config.num_classes)).collect();
    check_model(&model, &rgb, &depth, &labels, cfg)
}

impl GradCheckReport {
    /// Worst relative error and number of checked entries per parameter tensor.
    pub fn groups(&self) -> BTreeMap<String, (f64, usize)> {
        let mut out: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for e in &self.entries {
            let slot = out.entry(e.name.clone()).or_insert((0.0, 0));
            slot.0 = slot.0.max(e.rel_error);
            slot.1 += 1;
        }
        out
    }
}
