//! Configuration search over worker counts and batch size.
//!
//! The per-iteration delay of a configuration `(w_a, w_p, B)` is
//!
//! ```text
//! max(T_f^a + T_b^a + T_top^a, T_f^p + T_b^p) + (E + G) / B_b
//! ```
//!
//! [`dp_search`] fills the table `dp[i][j][r]` over `w_a = P+i−1`,
//! `w_p = M+j−1` and the `r`-th candidate batch size, caching the power-law
//! terms once per batch size. [`brute_force_search`] evaluates every cell from
//! scratch and serves as its oracle. Both assemble the cost through the same
//! expression so their results agree bit for bit.
//!
//! Ties are broken towards smaller `B`, then smaller `w_a`, then smaller `w_p`.

use std::cmp::Ordering;
use std::ops::RangeInclusive;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::profiler::{memory_bound, per_worker, power_term, DelayModelConstants};

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    /// `[P..Q]`.
    pub w_a: RangeInclusive<usize>,
    /// `[M..N]`.
    pub w_p: RangeInclusive<usize>,
    pub batch_sizes: Vec<usize>,
    /// Overrides the memory-derived ceiling when set.
    pub b_max: Option<f64>,
}

impl SearchSpace {
    pub fn new(w_a: RangeInclusive<usize>, w_p: RangeInclusive<usize>, batch_sizes: Vec<usize>) -> Self {
        Self {
            w_a,
            w_p,
            batch_sizes,
            b_max: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.w_a.is_empty() || self.w_p.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::config("search ranges and batch candidates must be non-empty"));
        }
        if *self.w_a.start() == 0 || *self.w_p.start() == 0 || self.batch_sizes.contains(&0) {
            return Err(Error::config("worker counts and batch sizes must be >= 1"));
        }
        Ok(())
    }

    /// Effective ceiling: the override, else the memory model's bound.
    pub fn ceiling(&self, c: &DelayModelConstants) -> Result<f64> {
        match self.b_max {
            Some(b) => Ok(b),
            None => memory_bound(c),
        }
    }

    /// 1-based indices `r` of the candidates not exceeding the ceiling.
    fn feasible(&self, c: &DelayModelConstants) -> Result<Vec<usize>> {
        self.validate()?;
        let ceiling = self.ceiling(c)?;
        let rs: Vec<usize> = (1..=self.batch_sizes.len())
            .filter(|&r| self.batch_sizes[r - 1] as f64 <= ceiling)
            .collect();
        if rs.is_empty() {
            return Err(Error::Infeasible(format!(
                "no candidate batch size fits under B_max = {ceiling}"
            )));
        }
        Ok(rs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PlanState {
    pub i: usize,
    pub j: usize,
    pub r: usize,
    pub w_a: usize,
    pub w_p: usize,
    pub batch_size: usize,
    /// Seconds per iteration.
    pub cost: f64,
}

impl PlanState {
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("w_a", self.w_a);
        kv.set("w_p", self.w_p);
        kv.set("batch_size", self.batch_size);
        kv.set("cost", self.cost);
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        Ok(Self {
            i: kv.get("i")?.unwrap_or(0),
            j: kv.get("j")?.unwrap_or(0),
            r: kv.get("r")?.unwrap_or(0),
            w_a: kv.require("w_a")?,
            w_p: kv.require("w_p")?,
            batch_size: kv.require("batch_size")?,
            cost: kv.require("cost")?,
        })
    }

    fn key(&self) -> (usize, usize, usize) {
        (self.batch_size, self.w_a, self.w_p)
    }

    /// Lower cost wins; equal cost falls back to the tie-break order.
    fn better_than(&self, other: &PlanState) -> bool {
        match self.cost.total_cmp(&other.cost) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => self.key() < other.key(),
        }
    }
}

/// The six power-law terms and the communication delay at one batch size.
#[derive(Clone, Copy, Debug)]
struct BatchTerms {
    fwd_a: f64,
    bwd_a: f64,
    top_fwd: f64,
    top_bwd: f64,
    fwd_p: f64,
    bwd_p: f64,
    comm: f64,
}

impl BatchTerms {
    fn at(c: &DelayModelConstants, batch: usize) -> Self {
        let b = batch as f64;
        let (e, g) = c.message_bytes(b);
        Self {
            fwd_a: power_term(c.lambda_a, c.gamma_a, b),
            bwd_a: power_term(c.phi_a, c.beta_a, b),
            top_fwd: power_term(c.lambda_a_top, c.gamma_a_top, b),
            top_bwd: power_term(c.phi_a_top, c.beta_a_top, b),
            fwd_p: power_term(c.lambda_p, c.gamma_p, b),
            bwd_p: power_term(c.phi_p, c.beta_p, b),
            comm: (e + g) / c.bandwidth,
        }
    }

    /// Same term order as [`crate::profiler::predict_times`].
    fn objective(&self, c: &DelayModelConstants, w_a: usize, w_p: usize) -> f64 {
        let (wa, wp) = (w_a as f64, w_p as f64);
        let t_f_a = per_worker(self.fwd_a, wa, c.cores_a);
        let t_b_a = per_worker(self.bwd_a, wa, c.cores_a);
        let t_top_a = per_worker(self.top_fwd, wa, c.cores_a) + per_worker(self.top_bwd, wa, c.cores_a);
        let t_f_p = per_worker(self.fwd_p, wp, c.cores_p);
        let t_b_p = per_worker(self.bwd_p, wp, c.cores_p);
        (t_f_a + t_b_a + t_top_a).max(t_f_p + t_b_p) + self.comm
    }
}

/// Per-iteration delay of one configuration.
pub fn iteration_objective(c: &DelayModelConstants, w_a: usize, w_p: usize, batch: usize) -> Result<f64> {
    if w_a == 0 || w_p == 0 || batch == 0 {
        return Err(Error::config("worker counts and batch size must be >= 1"));
    }
    let ceiling = memory_bound(c)?;
    if batch as f64 > ceiling {
        return Err(Error::Infeasible(format!("batch size {batch} exceeds B_max = {ceiling}")));
    }
    Ok(BatchTerms::at(c, batch).objective(c, w_a, w_p))
}

/// Compute-only cost of cell `(i, j, r)` in factored form: each party's
/// summed power terms scaled once by `w / C`.
pub fn state_cost(c: &DelayModelConstants, space: &SearchSpace, i: usize, j: usize, r: usize) -> Result<f64> {
    space.validate()?;
    let n_a = space.w_a.clone().count();
    let n_p = space.w_p.clone().count();
    if !(1..=n_a).contains(&i) || !(1..=n_p).contains(&j) || !(1..=space.batch_sizes.len()).contains(&r) {
        return Err(Error::config(format!(
            "state ({i},{j},{r}) outside grid {n_a}x{n_p}x{}",
            space.batch_sizes.len()
        )));
    }
    let batch = space.batch_sizes[r - 1];
    let ceiling = space.ceiling(c)?;
    if batch as f64 > ceiling {
        return Err(Error::Infeasible(format!("batch size {batch} exceeds B_max = {ceiling}")));
    }
    let w_a = (space.w_a.start() + i - 1) as f64;
    let w_p = (space.w_p.start() + j - 1) as f64;
    let t = BatchTerms::at(c, batch);
    let active = (t.fwd_a + t.top_fwd + t.bwd_a + t.top_bwd) * w_a / c.cores_a;
    let passive = (t.fwd_p + t.bwd_p) * w_p / c.cores_p;
    Ok(active.max(passive))
}

/// Table search with per-batch-size caching.
pub fn dp_search(c: &DelayModelConstants, space: &SearchSpace) -> Result<PlanState> {
    let mut rs = space.feasible(c)?;
    rs.sort_by_key(|&r| (space.batch_sizes[r - 1], r));
    let n_a = space.w_a.clone().count();
    let n_p = space.w_p.clone().count();

    let mut dp = vec![vec![vec![f64::INFINITY; space.batch_sizes.len()]; n_p]; n_a];
    let mut best: Option<PlanState> = None;
    for &r in &rs {
        let batch = space.batch_sizes[r - 1];
        let terms = BatchTerms::at(c, batch);
        for i in 1..=n_a {
            let w_a = space.w_a.start() + i - 1;
            for j in 1..=n_p {
                let w_p = space.w_p.start() + j - 1;
                let cost = terms.objective(c, w_a, w_p);
                dp[i - 1][j - 1][r - 1] = cost;
                if best.is_none_or(|b| cost < b.cost) {
                    best = Some(PlanState {
                        i,
                        j,
                        r,
                        w_a,
                        w_p,
                        batch_size: batch,
                        cost,
                    });
                }
            }
        }
    }
    Ok(best.expect("feasible set is non-empty"))
}

/// Exhaustive enumeration in the order the space lists its values.
pub fn brute_force_search(c: &DelayModelConstants, space: &SearchSpace) -> Result<PlanState> {
    let rs = space.feasible(c)?;
    let mut best: Option<PlanState> = None;
    for (i, w_a) in space.w_a.clone().enumerate() {
        for (j, w_p) in space.w_p.clone().enumerate() {
            for &r in &rs {
                let batch = space.batch_sizes[r - 1];
                let cand = PlanState {
                    i: i + 1,
                    j: j + 1,
                    r,
                    w_a,
                    w_p,
                    batch_size: batch,
                    cost: BatchTerms::at(c, batch).objective(c, w_a, w_p),
                };
                if best.is_none_or(|b| cand.better_than(&b)) {
                    best = Some(cand);
                }
            }
        }
    }
    Ok(best.expect("feasible set is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiler::predict_times;

    fn space(wa: RangeInclusive<usize>, wp: RangeInclusive<usize>, bs: &[usize]) -> SearchSpace {
        SearchSpace::new(wa, wp, bs.to_vec())
    }

    #[test]
    fn objective_matches_predicted_times() {
        let c = DelayModelConstants::reference();
        let t = predict_times(&c, 256, 8, 10).unwrap();
        let expect = (t.t_f_a + t.t_b_a + t.t_top_a).max(t.t_f_p + t.t_b_p) + t.t_emb + t.t_grad;
        let got = iteration_objective(&c, 8, 10, 256).unwrap();
        assert!((got - expect).abs() <= 1e-15 * expect);
    }

    #[test]
    fn zero_comm_is_compute_max() {
        let mut c = DelayModelConstants::reference();
        c.emb_bytes = 0.0;
        c.grad_bytes = 0.0;
        let t = predict_times(&c, 64, 3, 5).unwrap();
        let got = iteration_objective(&c, 3, 5, 64).unwrap();
        assert_eq!(got, (t.t_f_a + t.t_b_a + t.t_top_a).max(t.t_f_p + t.t_b_p));
    }

    #[test]
    fn single_cell_grid() {
        let c = DelayModelConstants::reference();
        let s = space(3..=3, 4..=4, &[128]);
        let dp = dp_search(&c, &s).unwrap();
        assert_eq!((dp.i, dp.j, dp.r, dp.w_a, dp.w_p, dp.batch_size), (1, 1, 1, 3, 4, 128));
        let sc = state_cost(&c, &s, 1, 1, 1).unwrap();
        let comm = iteration_objective(&c, 3, 4, 128).unwrap() - sc;
        let (e, g) = c.message_bytes(128.0);
        assert!((comm - (e + g) / c.bandwidth).abs() < 1e-12);
    }

    #[test]
    fn monotone_case_picks_minimum_workers() {
        // Positive exponents and fixed B: cost grows with w.
        let mut c = DelayModelConstants::reference();
        for e in [&mut c.gamma_a, &mut c.gamma_p, &mut c.beta_a, &mut c.beta_p, &mut c.gamma_a_top, &mut c.beta_a_top] {
            *e = 0.5;
        }
        let s = space(2..=9, 2..=9, &[64]);
        let best = brute_force_search(&c, &s).unwrap();
        assert_eq!((best.w_a, best.w_p), (2, 2));
        assert_eq!(dp_search(&c, &s).unwrap(), best);
    }

    #[test]
    fn infeasible_space_is_an_error() {
        let c = DelayModelConstants::reference();
        let mut s = space(1..=2, 1..=2, &[512, 1024]);
        s.b_max = Some(100.0);
        assert!(matches!(dp_search(&c, &s), Err(Error::Infeasible(_))));
        assert!(matches!(brute_force_search(&c, &s), Err(Error::Infeasible(_))));
        assert!(state_cost(&c, &s, 3, 1, 1).is_err());
    }

    #[test]
    fn plan_round_trip() {
        let c = DelayModelConstants::reference();
        let p = dp_search(&c, &space(2..=50, 2..=50, &[16, 32, 64, 128, 256, 512, 1024])).unwrap();
        let back = PlanState::from_kv(&KvFile::parse(&p.to_kv().render()).unwrap()).unwrap();
        assert_eq!((back.w_a, back.w_p, back.batch_size), (p.w_a, p.w_p, p.batch_size));
        assert_eq!(back.cost.to_bits(), p.cost.to_bits());
    }
}
