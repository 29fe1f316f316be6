//! Runtime profiling and the delay/memory cost model.
//!
//! Per-worker forward and backward delays follow power laws in the batch
//! size scaled by the worker's share of the party's cores:
//!
//! ```text
//! T_f^a(B)   = λ_a B^γ_a · w_a / C_a          T_f^p(B) = λ_p B^γ_p · w_p / C_p
//! T_b^a(B)   = φ_a B^β_a · w_a / C_a          T_b^p(B) = φ_p B^β_p · w_p / C_p
//! T_top^a(B) = λ'_a B^γ'_a · w_a / C_a + φ'_a B^β'_a · w_a / C_a
//! T_emb      = E / B_b                        T_grad   = G / B_b
//! ```
//!
//! Memory per worker is `M(B) = M0 + ρ B^χ`, giving the feasible ceiling
//! `B_max = min_party ((M̄ − M0) / ρ)^(1/χ)`.
//!
//! Constants are fitted from timings by ordinary least squares in log-log
//! space.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::nn::MlpModel;
use crate::split::SplitModels;
use crate::tensor::{DenseMatrix, WIRE_HEADER_BYTES};

/// Batch sizes swept by default during calibration.
pub const DEFAULT_SWEEP: [usize; 10] = [2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];

/// How message sizes depend on the batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommScaling {
    /// `E` and `G` are used as-is for every batch size.
    Fixed,
    /// `E` and `G` were measured at `ref_batch`; the payload part scales
    /// linearly with the batch size, the 16-byte header does not.
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayModelConstants {
    pub lambda_a: f64,
    pub gamma_a: f64,
    pub lambda_p: f64,
    pub gamma_p: f64,
    pub phi_a: f64,
    pub beta_a: f64,
    pub phi_p: f64,
    pub beta_p: f64,
    pub lambda_a_top: f64,
    pub gamma_a_top: f64,
    pub phi_a_top: f64,
    pub beta_a_top: f64,
    pub cores_a: f64,
    pub cores_p: f64,
    /// Embedding message size in bytes at `ref_batch`.
    pub emb_bytes: f64,
    /// Gradient message size in bytes at `ref_batch`.
    pub grad_bytes: f64,
    pub ref_batch: f64,
    pub comm_scaling: CommScaling,
    /// Bytes per second.
    pub bandwidth: f64,
    pub mem_a0: f64,
    pub mem_p0: f64,
    pub rho_a: f64,
    pub rho_p: f64,
    pub chi: f64,
    pub mem_bar_a: f64,
    pub mem_bar_p: f64,
}

impl DelayModelConstants {
    /// Fitted constants of a 64-core reference deployment (32 cores per
    /// party) with 16-wide embeddings at batch 256 over a 1 Gbit/s link and
    /// an 8 GiB per-worker memory budget. Used as golden fixtures.
    pub fn reference() -> Self {
        let msg = (WIRE_HEADER_BYTES + 8 * 16 * 256) as f64;
        Self {
            lambda_a: 0.018,
            gamma_a: -0.8015,
            lambda_p: 0.010,
            gamma_p: -1.0071,
            phi_a: 0.066,
            beta_a: -0.6069,
            phi_p: 0.038,
            beta_p: -1.0546,
            lambda_a_top: 0.011,
            gamma_a_top: -0.7514,
            phi_a_top: 0.072,
            beta_a_top: -0.7834,
            cores_a: 32.0,
            cores_p: 32.0,
            emb_bytes: msg,
            grad_bytes: msg,
            ref_batch: 256.0,
            comm_scaling: CommScaling::Fixed,
            bandwidth: 125e6,
            mem_a0: 64.0 * 1024.0 * 1024.0,
            mem_p0: 64.0 * 1024.0 * 1024.0,
            rho_a: 4.0 * 1024.0 * 1024.0,
            rho_p: 4.0 * 1024.0 * 1024.0,
            chi: 1.0,
            mem_bar_a: 8.0 * 1024.0 * 1024.0 * 1024.0,
            mem_bar_p: 8.0 * 1024.0 * 1024.0 * 1024.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coefs = [
            self.lambda_a,
            self.lambda_p,
            self.phi_a,
            self.phi_p,
            self.lambda_a_top,
            self.phi_a_top,
        ];
        if coefs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::config("delay coefficients must be finite and >= 0"));
        }
        let exps = [
            self.gamma_a,
            self.gamma_p,
            self.beta_a,
            self.beta_p,
            self.gamma_a_top,
            self.beta_a_top,
        ];
        if exps.iter().any(|e| !e.is_finite()) {
            return Err(Error::config("delay exponents must be finite"));
        }
        if !(self.cores_a >= 1.0 && self.cores_p >= 1.0) {
            return Err(Error::config("core counts must be >= 1"));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::config("bandwidth must be positive"));
        }
        if !(self.emb_bytes >= 0.0 && self.grad_bytes >= 0.0 && self.ref_batch >= 1.0) {
            return Err(Error::config("message sizes must be >= 0 and ref_batch >= 1"));
        }
        if !(self.rho_a > 0.0 && self.rho_p > 0.0 && self.chi > 0.0) {
            return Err(Error::config("memory slopes and exponent must be positive"));
        }
        Ok(())
    }

    /// `(E, G)` in bytes for a batch of size `b`.
    pub fn message_bytes(&self, b: f64) -> (f64, f64) {
        match self.comm_scaling {
            CommScaling::Fixed => (self.emb_bytes, self.grad_bytes),
            CommScaling::PerSample => {
                let h = WIRE_HEADER_BYTES as f64;
                let scale = |bytes: f64| h + (bytes - h).max(0.0) * b / self.ref_batch;
                (scale(self.emb_bytes), scale(self.grad_bytes))
            }
        }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        for (k, v) in self.numeric_fields() {
            kv.set(k, v);
        }
        kv.set(
            "comm_scaling",
            match self.comm_scaling {
                CommScaling::Fixed => "fixed",
                CommScaling::PerSample => "per_sample",
            },
        );
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut c = Self::reference();
        for (key, slot) in c.numeric_fields_mut() {
            *slot = kv.require(key)?;
        }
        c.comm_scaling = match kv.get_str("comm_scaling").unwrap_or("per_sample") {
            "fixed" => CommScaling::Fixed,
            "per_sample" => CommScaling::PerSample,
            other => return Err(Error::config(format!("unknown comm_scaling '{other}'"))),
        };
        c.validate()?;
        Ok(c)
    }

    fn numeric_fields(&self) -> Vec<(&'static str, f64)> {
        let mut copy = self.clone();
        copy.numeric_fields_mut().into_iter().map(|(k, v)| (k, *v)).collect()
    }

    fn numeric_fields_mut(&mut self) -> Vec<(&'static str, &mut f64)> {
        vec![
            ("lambda_a", &mut self.lambda_a),
            ("gamma_a", &mut self.gamma_a),
            ("lambda_p", &mut self.lambda_p),
            ("gamma_p", &mut self.gamma_p),
            ("phi_a", &mut self.phi_a),
            ("beta_a", &mut self.beta_a),
            ("phi_p", &mut self.phi_p),
            ("beta_p", &mut self.beta_p),
            ("lambda_a_top", &mut self.lambda_a_top),
            ("gamma_a_top", &mut self.gamma_a_top),
            ("phi_a_top", &mut self.phi_a_top),
            ("beta_a_top", &mut self.beta_a_top),
            ("cores_a", &mut self.cores_a),
            ("cores_p", &mut self.cores_p),
            ("emb_bytes", &mut self.emb_bytes),
            ("grad_bytes", &mut self.grad_bytes),
            ("ref_batch", &mut self.ref_batch),
            ("bandwidth", &mut self.bandwidth),
            ("mem_a0", &mut self.mem_a0),
            ("mem_p0", &mut self.mem_p0),
            ("rho_a", &mut self.rho_a),
            ("rho_p", &mut self.rho_p),
            ("chi", &mut self.chi),
            ("mem_bar_a", &mut self.mem_bar_a),
            ("mem_bar_p", &mut self.mem_bar_p),
        ]
    }
}

/// `coef · B^exp`.
#[inline]
pub fn power_term(coef: f64, exp: f64, b: f64) -> f64 {
    coef * b.powf(exp)
}

/// A power-law term scaled to one worker's core share: `term · w / C`.
#[inline]
pub fn per_worker(term: f64, workers: f64, cores: f64) -> f64 {
    term * workers / cores
}

/// `(E + G) / B_b` at batch size `b`.
#[inline]
pub fn comm_delay(c: &DelayModelConstants, b: f64) -> f64 {
    let (e, g) = c.message_bytes(b);
    (e + g) / c.bandwidth
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PredictedTimes {
    pub t_f_a: f64,
    pub t_b_a: f64,
    pub t_top_a: f64,
    pub t_f_p: f64,
    pub t_b_p: f64,
    pub t_emb: f64,
    pub t_grad: f64,
}

pub fn predict_times(c: &DelayModelConstants, batch: usize, w_a: usize, w_p: usize) -> Result<PredictedTimes> {
    if batch == 0 || w_a == 0 || w_p == 0 {
        return Err(Error::config("batch size and worker counts must be >= 1"));
    }
    let b = batch as f64;
    let (wa, wp) = (w_a as f64, w_p as f64);
    let (e, g) = c.message_bytes(b);
    Ok(PredictedTimes {
        t_f_a: per_worker(power_term(c.lambda_a, c.gamma_a, b), wa, c.cores_a),
        t_b_a: per_worker(power_term(c.phi_a, c.beta_a, b), wa, c.cores_a),
        t_top_a: per_worker(power_term(c.lambda_a_top, c.gamma_a_top, b), wa, c.cores_a)
            + per_worker(power_term(c.phi_a_top, c.beta_a_top, b), wa, c.cores_a),
        t_f_p: per_worker(power_term(c.lambda_p, c.gamma_p, b), wp, c.cores_p),
        t_b_p: per_worker(power_term(c.phi_p, c.beta_p, b), wp, c.cores_p),
        t_emb: e / c.bandwidth,
        t_grad: g / c.bandwidth,
    })
}

/// Largest batch size both parties' per-worker memory allows.
pub fn memory_bound(c: &DelayModelConstants) -> Result<f64> {
    if !(c.rho_a > 0.0 && c.rho_p > 0.0 && c.chi > 0.0) {
        return Err(Error::config("memory slopes and exponent must be positive"));
    }
    if c.mem_bar_a <= c.mem_a0 {
        return Err(Error::Infeasible(format!(
            "active memory budget {} does not exceed base usage {}",
            c.mem_bar_a, c.mem_a0
        )));
    }
    if c.mem_bar_p <= c.mem_p0 {
        return Err(Error::Infeasible(format!(
            "passive memory budget {} does not exceed base usage {}",
            c.mem_bar_p, c.mem_p0
        )));
    }
    let branch = |bar: f64, base: f64, rho: f64| ((bar - base) / rho).powf(1.0 / c.chi);
    Ok(branch(c.mem_bar_a, c.mem_a0, c.rho_a).min(branch(c.mem_bar_p, c.mem_p0, c.rho_p)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CalibrationRole {
    ActiveBottomFwd,
    ActiveBottomBwd,
    TopFwd,
    TopBwd,
    PassiveFwd,
    PassiveBwd,
}

impl CalibrationRole {
    pub const ALL: [CalibrationRole; 6] = [
        CalibrationRole::ActiveBottomFwd,
        CalibrationRole::ActiveBottomBwd,
        CalibrationRole::TopFwd,
        CalibrationRole::TopBwd,
        CalibrationRole::PassiveFwd,
        CalibrationRole::PassiveBwd,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub batch_size: usize,
    pub role: CalibrationRole,
    /// Median seconds over `repetitions`.
    pub elapsed: f64,
    pub repetitions: usize,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_secs(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64().max(1e-9))
}

/// Times every role at every batch size on random inputs. Each role runs
/// single-threaded; the reported time is the median over `repetitions`.
pub fn run_calibration(
    models: &SplitModels,
    batch_sizes: &[usize],
    repetitions: usize,
) -> Result<Vec<CalibrationSample>> {
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::config("calibration needs non-empty batch sizes >= 1"));
    }
    let repetitions = repetitions.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0xca11_b8a7);
    let mut out = Vec::with_capacity(batch_sizes.len() * CalibrationRole::ALL.len());
    for &b in batch_sizes {
        let xa = gaussian_matrix(b, models.active_bottom.input_dim(), &mut rng);
        let xp = gaussian_matrix(b, models.passive_bottom.input_dim(), &mut rng);
        let mut times: [Vec<f64>; 6] = Default::default();
        for _ in 0..repetitions {
            let fwd = |m: &MlpModel, x: &DenseMatrix| -> Result<(f64, crate::nn::ForwardTape)> {
                let start = Instant::now();
                let (_, tape) = m.forward(x)?;
                Ok((start.elapsed().as_secs_f64().max(1e-9), tape))
            };
            let (t, tape_a) = fwd(&models.active_bottom, &xa)?;
            times[0].push(t);
            let up_a = DenseMatrix::filled(b, models.active_bottom.output_dim(), 1.0);
            times[1].push(time_secs(|| models.active_bottom.backward(&tape_a, &up_a).map(drop))?);

            let (t, tape_p) = fwd(&models.passive_bottom, &xp)?;
            times[4].push(t);
            let up_p = DenseMatrix::filled(b, models.passive_bottom.output_dim(), 1.0);
            times[5].push(time_secs(|| models.passive_bottom.backward(&tape_p, &up_p).map(drop))?);

            let z = tape_a.output().hconcat(tape_p.output())?;
            let (t, tape_top) = fwd(&models.top, &z)?;
            times[2].push(t);
            let up_top = DenseMatrix::filled(b, models.top.output_dim(), 1.0);
            times[3].push(time_secs(|| models.top.backward(&tape_top, &up_top).map(drop))?);
        }
        let roles = [
            CalibrationRole::ActiveBottomFwd,
            CalibrationRole::ActiveBottomBwd,
            CalibrationRole::TopFwd,
            CalibrationRole::TopBwd,
            CalibrationRole::PassiveFwd,
            CalibrationRole::PassiveBwd,
        ];
        for (role, ts) in roles.into_iter().zip(times) {
            out.push(CalibrationSample {
                batch_size: b,
                role,
                elapsed: median(ts),
                repetitions,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub coef: f64,
    pub exponent: f64,
    pub r_squared: f64,
}

/// Fits `T = coef · B^exponent` by least squares on `(ln B, ln T)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::config(format!(
            "power-law fit needs >= 3 distinct batch sizes, got {}",
            distinct.len()
        )));
    }
    if let Some(bad) = points.iter().find(|(b, t)| !(*b > 0.0 && *t > 0.0 && t.is_finite())) {
        return Err(Error::config(format!("power-law fit needs positive values, got {bad:?}")));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + exponent * x);
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(PowerLawFit {
        coef: intercept.exp(),
        exponent,
        r_squared,
    })
}

/// Deployment facts that timings cannot reveal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileEnv {
    pub cores_a: usize,
    pub cores_p: usize,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Per-worker memory budget in bytes.
    pub mem_bar_a: f64,
    pub mem_bar_p: f64,
}

impl Default for ProfileEnv {
    fn default() -> Self {
        let cores = std::thread::available_parallelism().map_or(2, |n| n.get());
        Self {
            cores_a: (cores / 2).max(1),
            cores_p: (cores / 2).max(1),
            bandwidth: 125e6,
            mem_bar_a: 1024.0 * 1024.0 * 1024.0,
            mem_bar_p: 1024.0 * 1024.0 * 1024.0,
        }
    }
}

/// Bytes of tape kept per sample: input, pre- and post-activations.
fn activation_bytes_per_sample(m: &MlpModel) -> f64 {
    let floats = m.input_dim() + m.layers().iter().map(|l| 2 * l.fan_out()).sum::<usize>();
    8.0 * floats as f64
}

/// Parameters plus gradients.
fn model_bytes(m: &MlpModel) -> f64 {
    16.0 * m.param_count() as f64
}

/// Fits every delay constant and derives the memory model and message sizes
/// from the model shapes.
pub fn fit_constants(
    samples: &[CalibrationSample],
    models: &SplitModels,
    env: &ProfileEnv,
) -> Result<(DelayModelConstants, Vec<(CalibrationRole, PowerLawFit)>)> {
    let mut fits = Vec::new();
    for role in CalibrationRole::ALL {
        let pts: Vec<(f64, f64)> = samples
            .iter()
            .filter(|s| s.role == role)
            .map(|s| (s.batch_size as f64, s.elapsed))
            .collect();
        let fit = fit_power_law(&pts)?;
        if fit.r_squared < 0.9 {
            log::warn!("power-law fit for {role:?} has r² = {:.3}", fit.r_squared);
        }
        fits.push((role, fit));
    }
    let get = |role| fits.iter().find(|(r, _)| *r == role).map(|(_, f)| *f).expect("fitted");
    let ref_batch = samples.iter().map(|s| s.batch_size).max().unwrap_or(1);

    // Measured from the wire encoding of a real embedding / gradient.
    let emb = DenseMatrix::zeros(ref_batch, models.embedding_dim());
    let msg_bytes = emb.wire_len() as f64;

    let f = |role| get(role);
    let c = DelayModelConstants {
        lambda_a: f(CalibrationRole::ActiveBottomFwd).coef,
        gamma_a: f(CalibrationRole::ActiveBottomFwd).exponent,
        phi_a: f(CalibrationRole::ActiveBottomBwd).coef,
        beta_a: f(CalibrationRole::ActiveBottomBwd).exponent,
        lambda_a_top: f(CalibrationRole::TopFwd).coef,
        gamma_a_top: f(CalibrationRole::TopFwd).exponent,
        phi_a_top: f(CalibrationRole::TopBwd).coef,
        beta_a_top: f(CalibrationRole::TopBwd).exponent,
        lambda_p: f(CalibrationRole::PassiveFwd).coef,
        gamma_p: f(CalibrationRole::PassiveFwd).exponent,
        phi_p: f(CalibrationRole::PassiveBwd).coef,
        beta_p: f(CalibrationRole::PassiveBwd).exponent,
        cores_a: env.cores_a as f64,
        cores_p: env.cores_p as f64,
        emb_bytes: msg_bytes,
        grad_bytes: msg_bytes,
        ref_batch: ref_batch as f64,
        comm_scaling: CommScaling::PerSample,
        bandwidth: env.bandwidth,
        mem_a0: model_bytes(&models.active_bottom) + model_bytes(&models.top),
        mem_p0: model_bytes(&models.passive_bottom),
        rho_a: activation_bytes_per_sample(&models.active_bottom) + activation_bytes_per_sample(&models.top),
        rho_p: activation_bytes_per_sample(&models.passive_bottom),
        chi: 1.0,
        mem_bar_a: env.mem_bar_a,
        mem_bar_p: env.mem_bar_p,
    };
    c.validate()?;
    Ok((c, fits))
}
