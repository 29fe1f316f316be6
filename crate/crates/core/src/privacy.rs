//! Gaussian differential-privacy noise on passive-party embeddings.
//!
//! The noise scale is `σ = c · N_m · √K / (μ · N)` where `N_m` is the
//! minibatch size, `N` the full training-set size, `K` the number of batches a
//! worker publishes, `μ` the privacy parameter and `c` an explicit constant
//! (default 1). `μ = ∞` disables noise.
//!
//! Stream mapping: each worker draws from `ChaCha8Rng::seed_from_u64(seed ^
//! worker_id)`; every entry, in row-major order, receives `σ · z` with `z` a
//! `rand_distr::StandardNormal` sample. This mapping is stable within a
//! release.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::broker::{ChannelMessage, MessageKind};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdpConfig {
    /// `f64::INFINITY` disables noise.
    pub mu: f64,
    pub minibatch_size: usize,
    pub whole_batch_size: usize,
    pub num_queries: usize,
    pub scale_constant: f64,
    /// Recorded for reporting only; never used in calibration.
    pub delta: f64,
    pub seed: u64,
}

impl Default for GdpConfig {
    fn default() -> Self {
        Self {
            mu: f64::INFINITY,
            minibatch_size: 1,
            whole_batch_size: 1,
            num_queries: 1,
            scale_constant: 1.0,
            delta: 1e-5,
            seed: 0,
        }
    }
}

impl GdpConfig {
    pub fn disabled(&self) -> bool {
        self.mu == f64::INFINITY
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || self.mu.is_nan() {
            return Err(Error::config(format!("mu must be > 0 or inf, got {}", self.mu)));
        }
        if self.minibatch_size == 0 || self.whole_batch_size == 0 {
            return Err(Error::config("GDP batch sizes must be >= 1"));
        }
        if self.minibatch_size > self.whole_batch_size {
            return Err(Error::config(format!(
                "minibatch size {} exceeds whole batch size {}",
                self.minibatch_size, self.whole_batch_size
            )));
        }
        if self.num_queries == 0 {
            return Err(Error::config("GDP query count must be >= 1"));
        }
        if !(self.scale_constant > 0.0 && self.scale_constant.is_finite()) {
            return Err(Error::config("GDP scale constant must be positive and finite"));
        }
        Ok(())
    }
}

pub fn calibrate_sigma(config: &GdpConfig) -> Result<f64> {
    config.validate()?;
    if config.disabled() {
        return Ok(0.0);
    }
    Ok(config.scale_constant * config.minibatch_size as f64 * (config.num_queries as f64).sqrt()
        / (config.mu * config.whole_batch_size as f64))
}

/// `embedding + N(0, σ²)` elementwise. `σ = 0` returns an exact copy.
pub fn add_noise(embedding: &DenseMatrix, sigma: f64, rng: &mut ChaCha8Rng) -> Result<DenseMatrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise scale must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(embedding.clone());
    }
    let mut out = embedding.clone();
    for v in out.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    Ok(out)
}

/// Running statistics of the noise actually drawn.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NoiseReport {
    pub sigma_dp: f64,
    pub samples_drawn: u64,
    mean: f64,
    m2: f64,
}

impl NoiseReport {
    fn record(&mut self, x: f64) {
        self.samples_drawn += 1;
        let delta = x - self.mean;
        self.mean += delta / self.samples_drawn as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance of the recorded draws.
    pub fn variance(&self) -> f64 {
        if self.samples_drawn == 0 {
            0.0
        } else {
            self.m2 / self.samples_drawn as f64
        }
    }
}

/// A worker's private noise stream.
#[derive(Clone, Debug)]
pub struct NoiseInjector {
    sigma: f64,
    rng: ChaCha8Rng,
    report: NoiseReport,
}

impl NoiseInjector {
    pub fn new(sigma: f64, run_seed: u64, worker_id: usize) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("noise scale must be finite and >= 0, got {sigma}")));
        }
        Ok(Self {
            sigma,
            rng: ChaCha8Rng::seed_from_u64(run_seed ^ worker_id as u64),
            report: NoiseReport {
                sigma_dp: sigma,
                ..NoiseReport::default()
            },
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn report(&self) -> &NoiseReport {
        &self.report
    }

    /// Noises an embedding message in place. Fails if the message was
    /// already noised or is not an embedding.
    pub fn apply(&mut self, message: &mut ChannelMessage) -> Result<()> {
        if message.kind != MessageKind::Embedding {
            return Err(Error::config("noise is only applied to embeddings"));
        }
        if message.noised {
            return Err(Error::DoubleNoise(message.batch_id));
        }
        if self.sigma > 0.0 {
            let noisy = add_noise(&message.payload, self.sigma, &mut self.rng)?;
            for (&n, &c) in noisy.as_slice().iter().zip(message.payload.as_slice()) {
                self.report.record(n - c);
            }
            message.payload = noisy;
        }
        message.noised = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mu: f64, nm: usize, n: usize, k: usize) -> GdpConfig {
        GdpConfig {
            mu,
            minibatch_size: nm,
            whole_batch_size: n,
            num_queries: k,
            ..GdpConfig::default()
        }
    }

    #[test]
    fn calibration_cases() {
        assert_eq!(calibrate_sigma(&cfg(f64::INFINITY, 5, 10, 3)).unwrap(), 0.0);
        assert_eq!(calibrate_sigma(&cfg(1.0, 10, 10, 1)).unwrap(), 1.0);
        // 256 * sqrt(40) / 10000, evaluated with mpmath at 40 digits.
        let s = calibrate_sigma(&cfg(1.0, 256, 10000, 40)).unwrap();
        assert!((s - 0.161_908_616_200_621_02).abs() < 1e-15);
    }

    #[test]
    fn calibration_rejects_bad_config() {
        assert!(calibrate_sigma(&cfg(0.0, 1, 1, 1)).is_err());
        assert!(calibrate_sigma(&cfg(-1.0, 1, 1, 1)).is_err());
        assert!(calibrate_sigma(&cfg(1.0, 11, 10, 1)).is_err());
        assert!(calibrate_sigma(&cfg(1.0, 1, 10, 0)).is_err());
    }

    #[test]
    fn monotone_in_each_argument() {
        let base = calibrate_sigma(&cfg(1.0, 100, 1000, 10)).unwrap();
        assert!(calibrate_sigma(&cfg(2.0, 100, 1000, 10)).unwrap() < base);
        assert!(calibrate_sigma(&cfg(1.0, 100, 2000, 10)).unwrap() < base);
        assert!(calibrate_sigma(&cfg(1.0, 200, 1000, 10)).unwrap() > base);
        assert!(calibrate_sigma(&cfg(1.0, 100, 1000, 20)).unwrap() > base);
    }

    #[test]
    fn zero_sigma_is_exact_copy() {
        let x = DenseMatrix::from_vec(2, 2, vec![0.1, -0.0, 3.0, f64::MIN_POSITIVE]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = add_noise(&x, 0.0, &mut rng).unwrap();
        let bits = |m: &DenseMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
        assert!(add_noise(&x, -1.0, &mut rng).is_err());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let x = DenseMatrix::zeros(4, 4);
        let a = add_noise(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = add_noise(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn injector_refuses_double_noise() {
        let mut inj = NoiseInjector::new(0.5, 1, 0).unwrap();
        let mut m = ChannelMessage::new(MessageKind::Embedding, 0, 0, DenseMatrix::zeros(2, 2), 0..2, 0, 0);
        inj.apply(&mut m).unwrap();
        assert!(m.noised);
        assert!(matches!(inj.apply(&mut m), Err(Error::DoubleNoise(0))));
        assert_eq!(inj.report().samples_drawn, 4);
    }
}
