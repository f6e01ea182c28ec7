//! Adam with bias correction and the cosine learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{DType, Tensor};

/// `lr_min + (lr_max - lr_min)(1 + cos(π t / T)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Usage("schedule length must be at least 1".into()));
    }
    if step > total {
        return Err(Error::Usage(format!("step {step} is past the schedule end {total}")));
    }
    if step == total {
        return Ok(lr_min);
    }
    let phase = core::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + libm::cos(phase)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances the step counter and returns the bias-corrected step parameters.
    pub fn begin_step(&mut self, lr: f64) -> Result<StepScale> {
        if !(lr > 0.0) {
            return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
        }
        self.step += 1;
        let t = self.step as f64;
        Ok(StepScale {
            lr,
            first_correction: 1.0 - libm::pow(self.beta1, t),
            second_correction: 1.0 - libm::pow(self.beta2, t),
        })
    }

    /// Applies the current step to one parameter.
    pub fn update(&mut self, scale: &StepScale, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(dim_err(
                "adam_step",
                None,
                format!("{name}: gradient {:?} vs parameter {:?}", grad.shape(), param.shape()),
            ));
        }
        let m = self
            .first_moment
            .entry(String::from(name))
            .or_insert_with(|| Tensor::zeros(grad.shape(), DType::F64));
        let v = self
            .second_moment
            .entry(String::from(name))
            .or_insert_with(|| Tensor::zeros(grad.shape(), DType::F64));
        for i in 0..grad.numel() {
            let g = grad.data()[i];
            let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let delta = scale.lr * (mi / scale.first_correction) / (libm::sqrt(vi / scale.second_correction) + self.eps);
            let value = param.data()[i] - delta;
            param.set(i, value);
        }
        Ok(())
    }

    /// One full step over a name → tensor map. Shapes are checked before any update.
    pub fn step_map(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::Usage(format!("no parameter named {name}")))?;
            if p.shape() != g.shape() {
                return Err(dim_err(
                    "adam_step",
                    None,
                    format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        let scale = self.begin_step(lr)?;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            self.update(&scale, name, p, g)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepScale {
    pub lr: f64,
    pub first_correction: f64,
    pub second_correction: f64,
}
