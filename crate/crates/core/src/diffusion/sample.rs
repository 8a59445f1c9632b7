//! Ancestral sampling over the strided timestep subsequence.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Conditioning, Denoiser};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::seed::normal_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Classifier-free guidance weight; `1.0` runs the conditional pass only.
    pub guidance_scale: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { guidance_scale: 1.0 }
    }
}

/// What the sampler needs besides the denoiser.
pub struct SampleInputs<'a> {
    pub cond: &'a Conditioning,
    /// Conditions with empty text, required when `guidance_scale != 1`.
    pub uncond: Option<&'a Conditioning>,
    /// Image-space offset of the target (the bicubic upsampling for residual
    /// targets). Denoised estimates are clipped so that `base + x` stays in `[-1, 1]`.
    pub base: Option<&'a Tensor>,
}

fn clip_to_range(x: &Tensor, base: Option<&Tensor>) -> Result<Tensor> {
    Ok(match base {
        None => x.clamp(-1.0, 1.0)?,
        Some(b) => ((x + b)?.clamp(-1.0, 1.0)? - b)?,
    })
}

/// Returns the SR batch in `[-1, 1]`, shaped like `cond.lr_up`.
pub fn ddpm_sample(
    model: &dyn Denoiser,
    inputs: &SampleInputs<'_>,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let guided = cfg.guidance_scale != 1.0;
    if guided && inputs.uncond.is_none() {
        return Err(Error::Config("guidance_scale != 1 needs unconditional inputs".into()));
    }
    let shape = inputs.cond.lr_up.dims().to_vec();
    let (dtype, dev) = (inputs.cond.lr_up.dtype(), inputs.cond.lr_up.device());
    let mut x = normal_tensor(rng, &shape, dtype, dev)?;
    let b = shape[0];
    for i in (0..schedule.sample_steps().len()).rev() {
        let post = schedule.posterior(i)?;
        let ts = vec![post.t; b];
        let mut eps = model.predict_eps(&x, &ts, inputs.cond)?;
        if let (true, Some(u)) = (guided, inputs.uncond) {
            let eps_u = model.predict_eps(&x, &ts, u)?;
            eps = (&eps_u + ((eps - &eps_u)? * cfg.guidance_scale)?)?;
        }
        let x0 = clip_to_range(&schedule.predict_x0(&x, &eps, post.t)?, inputs.base)?;
        let mean = ((x0 * post.coef_x0)? + (&x * post.coef_xt)?)?;
        x = if i > 0 {
            let z = normal_tensor(rng, &shape, dtype, dev)?;
            (mean + (z * post.variance.sqrt())?)?
        } else {
            mean
        };
        x = x.detach();
    }
    Ok(match inputs.base {
        None => x.clamp(-1.0, 1.0)?,
        Some(b) => (x + b)?.clamp(-1.0, 1.0)?,
    })
}
