//! Linear-beta noise schedule, the forward process, and strided posteriors.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub sample_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            train_steps: 1000,
            sample_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.train_steps, self.sample_steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    sample_steps: Vec<usize>,
}

/// Coefficients of one reverse step `t -> prev` on the sampling subsequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub t: usize,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    /// Effective beta of the stride: `1 - alpha_bar / alpha_bar_prev`.
    pub beta: f64,
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

pub fn make_schedule(train_steps: usize, sample_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    if train_steps == 0 || sample_steps == 0 || sample_steps > train_steps {
        return Err(Error::Config(format!(
            "need 1 <= sample_steps <= train_steps, got {sample_steps} and {train_steps}"
        )));
    }
    let betas: Vec<f64> = if train_steps == 1 {
        vec![beta_min]
    } else {
        (0..train_steps)
            .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (train_steps - 1) as f64)
            .collect()
    };
    let mut alphas_bar = Vec::with_capacity(train_steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_bar.push(acc);
    }
    let steps = (0..sample_steps)
        .map(|i| (((i + 1) * train_steps) as f64 / sample_steps as f64).round() as usize - 1)
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas_bar,
        sample_steps: steps,
    })
}

impl NoiseSchedule {
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// Increasing timestep subsequence visited by the sampler (in reverse).
    pub fn sample_steps(&self) -> &[usize] {
        &self.sample_steps
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.train_steps() {
            return Err(Error::Domain(format!(
                "timestep {t} outside [0, {})",
                self.train_steps()
            )));
        }
        Ok(())
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise` with one timestep per batch item.
    pub fn q_sample(&self, x0: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
        if x0.dims() != noise.dims() {
            return Err(Error::Shape(format!(
                "x0 {:?} and noise {:?} differ",
                x0.dims(),
                noise.dims()
            )));
        }
        let b = x0.dim(0)?;
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch {b}", t.len())));
        }
        let mut signal = Vec::with_capacity(b);
        let mut sigma = Vec::with_capacity(b);
        for &ti in t {
            self.check_step(ti)?;
            signal.push(self.alphas_bar[ti].sqrt());
            sigma.push((1.0 - self.alphas_bar[ti]).sqrt());
        }
        let mut shape = vec![1; x0.rank()];
        shape[0] = b;
        let col = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape.clone(), x0.device())?.to_dtype(x0.dtype())?)
        };
        Ok(x0.broadcast_mul(&col(signal)?)?.add(&noise.broadcast_mul(&col(sigma)?)?)?)
    }

    /// Reverse-step coefficients for position `i` of the sampling subsequence.
    /// The last step (`i == 0`) lands on the clean image with zero variance.
    pub fn posterior(&self, i: usize) -> Result<PosteriorCoefficients> {
        let t = *self
            .sample_steps
            .get(i)
            .ok_or_else(|| Error::Domain(format!("sampling position {i} out of range")))?;
        let alpha_bar = self.alphas_bar[t];
        let alpha_bar_prev = if i == 0 { 1.0 } else { self.alphas_bar[self.sample_steps[i - 1]] };
        let beta = 1.0 - alpha_bar / alpha_bar_prev;
        Ok(PosteriorCoefficients {
            t,
            alpha_bar,
            alpha_bar_prev,
            beta,
            coef_x0: alpha_bar_prev.sqrt() * beta / (1.0 - alpha_bar),
            coef_xt: (1.0 - beta).sqrt() * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar),
            variance: beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar),
        })
    }

    /// `x0` implied by a noise prediction at timestep `t`.
    pub fn predict_x0(&self, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        let ab = self.alphas_bar[t];
        Ok(((x_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    use super::*;
    use crate::seed::normal_tensor;

    #[test]
    fn default_schedule_invariants() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.train_steps(), 1000);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alphas_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alphas_bar()[0] < 1.0);
        let steps = s.sample_steps();
        assert_eq!(steps.len(), 50);
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*steps.last().unwrap(), 999);
        assert_eq!(steps[0], 19);
    }

    #[test]
    fn alphas_bar_is_the_cumulative_product() {
        let s = make_schedule(1000, 50, 1e-4, 0.02).unwrap();
        let mut acc = 1.0f64;
        for t in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t as f64) / 999.0;
            acc *= 1.0 - beta;
            assert_eq!(s.alphas_bar()[t].to_bits(), acc.to_bits(), "t={t}");
        }
    }

    #[test]
    fn degenerate_single_step() {
        let s = make_schedule(1, 1, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas(), &[1e-4]);
        assert_eq!(s.sample_steps(), &[0]);
        let p = s.posterior(0).unwrap();
        assert_eq!(p.variance, 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_schedule(1000, 50, 0.0, 0.02).is_err());
        assert!(make_schedule(1000, 50, 0.02, 0.01).is_err());
        assert!(make_schedule(1000, 50, 1e-4, 1.0).is_err());
        assert!(make_schedule(10, 11, 1e-4, 0.02).is_err());
        assert!(make_schedule(0, 0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn posterior_variance_bounded_by_stride_beta() {
        let s = ScheduleConfig::default().build().unwrap();
        for i in 1..50 {
            let p = s.posterior(i).unwrap();
            assert!(p.variance > 0.0 && p.variance <= p.beta, "i={i}");
        }
        assert_eq!(s.posterior(0).unwrap().variance, 0.0);
        // With every step visited the stride beta is the schedule beta.
        let full = make_schedule(100, 100, 1e-4, 0.02).unwrap();
        for i in 1..100 {
            let p = full.posterior(i).unwrap();
            assert!((p.beta - full.betas()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn q_sample_limits() {
        let s = make_schedule(1000, 50, 1e-8, 0.02).unwrap();
        let dev = Device::Cpu;
        let x0 = Tensor::arange(0f64, 12.0, &dev).unwrap().reshape((1, 3, 2, 2)).unwrap();
        let zero = x0.zeros_like().unwrap();
        let out = s.q_sample(&x0, &[500], &zero).unwrap();
        let expect = (&x0 * s.alphas_bar()[500].sqrt()).unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let noise = normal_tensor(&mut rng, &[1, 3, 2, 2], DType::F64, &dev).unwrap();
        let near = s.q_sample(&x0, &[0], &noise).unwrap();
        let bound = (1.0 - s.alphas_bar()[0]).sqrt()
            * noise.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
        let dist = (near - &x0).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
        // Signal shrinkage adds at most (1 - sqrt(abar)) |x0|, which is ~1e-8 relative here.
        assert!(dist <= bound + 1e-6, "{dist} vs {bound}");
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = ScheduleConfig::default().build().unwrap();
        let dev = Device::Cpu;
        let n = 10_000;
        let t = 300;
        let x0_val = 0.7;
        let x0 = Tensor::full(x0_val, (n, 1), &dev).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noise = normal_tensor(&mut rng, &[n, 1], DType::F64, &dev).unwrap();
        let xt = s.q_sample(&x0, &vec![t; n], &noise).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alphas_bar()[t];
        let target_var = 1.0 - ab;
        let mean_se = (target_var / n as f64).sqrt();
        // Sample variance of a normal has standard error var * sqrt(2 / (n - 1)).
        let var_se = target_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * x0_val).abs() < 3.0 * mean_se, "mean {mean}");
        assert!((var - target_var).abs() < 3.0 * var_se, "var {var}");
    }

    #[test]
    fn q_sample_rejects_bad_inputs() {
        let s = ScheduleConfig::default().build().unwrap();
        let dev = Device::Cpu;
        let a = Tensor::zeros((2, 3), DType::F64, &dev).unwrap();
        let b = Tensor::zeros((2, 4), DType::F64, &dev).unwrap();
        assert!(s.q_sample(&a, &[0, 0], &b).is_err());
        assert!(s.q_sample(&a, &[0], &a).is_err());
        assert!(s.q_sample(&a, &[0, 1000], &a).is_err());
    }
}
