//! Training configuration and execution modes.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::nn::Optimizer;
use crate::runtime::schedule::SyncSchedule;
use crate::split::ModelShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Worker pools, dynamic assignment, bounded per-batch channels and a
    /// semi-asynchronous parameter-server schedule.
    PubSubVfl,
    /// One worker per party, lock-step exchange.
    PureVfl,
    /// Worker pools with fixed batch-to-worker pairing and lock-step
    /// exchange; parameter servers sync every epoch.
    VflPs,
    /// One worker per party, non-blocking exchange over depth-1 channels.
    Avfl,
    /// Worker pools, non-blocking exchange, sync every epoch.
    AvflPs,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::PubSubVfl, Mode::PureVfl, Mode::VflPs, Mode::Avfl, Mode::AvflPs];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PubSubVfl => "PubSubVFL",
            Mode::PureVfl => "PureVFL",
            Mode::VflPs => "VFL_PS",
            Mode::Avfl => "AVFL",
            Mode::AvflPs => "AVFL_PS",
        }
    }

    /// Modes that run exactly one worker per party.
    pub fn single_pair(self) -> bool {
        matches!(self, Mode::PureVfl | Mode::Avfl)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Mode::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase().replace('_', "") == key)
            .ok_or_else(|| Error::config(format!("unknown mode '{s}' (expected PubSubVFL, PureVFL, VFL_PS, AVFL or AVFL_PS)")))
    }
}

/// How batches are handed to workers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// One shared queue per party; idle workers take the next batch.
    Dynamic,
    /// Worker `k` of `w` owns batches `k, k+w, k+2w, …`.
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub w_a: usize,
    pub w_p: usize,
    pub eta: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub delta_t0: usize,
    pub t_ddl: Duration,
    pub p: usize,
    pub q: usize,
    /// Privacy parameter; infinite disables noise.
    pub mu: f64,
    pub gdp_scale: f64,
    pub gdp_delta: f64,
    /// Stop once the epoch-mean training loss is at most this.
    pub kappa: f64,
    pub seed: u64,
    /// Extra per-batch delay in each party's forward pass.
    pub skew_passive: Duration,
    pub skew_active: Duration,
    /// Embeddings a passive worker may have outstanding; `None` picks the
    /// mode default.
    pub max_inflight: Option<usize>,
    /// Retries of a deadline-skipped batch within one epoch.
    pub max_retries: usize,
    /// AUC at which time-to-target is recorded.
    pub target_auc: f64,
    pub shape: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::PubSubVfl,
            batch_size: 256,
            w_a: 4,
            w_p: 4,
            eta: 0.001,
            optimizer: Optimizer::Sgd,
            epochs: 20,
            delta_t0: 5,
            t_ddl: Duration::from_secs(10),
            p: 5,
            q: 5,
            mu: f64::INFINITY,
            gdp_scale: 1.0,
            gdp_delta: 1e-5,
            kappa: 0.0,
            seed: 0,
            skew_passive: Duration::ZERO,
            skew_active: Duration::ZERO,
            max_inflight: None,
            max_retries: 1,
            target_auc: 0.91,
            shape: ModelShape::default(),
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid list entry '{x}'")))
        })
        .collect()
}

fn render_list(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.w_a == 0 || self.w_p == 0 {
            return Err(Error::config("worker counts must be >= 1"));
        }
        if self.mode.single_pair() && (self.w_a != 1 || self.w_p != 1) {
            return Err(Error::config(format!(
                "{} runs one worker per party, got w_a={} w_p={}",
                self.mode, self.w_a, self.w_p
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.epochs == 0 || self.delta_t0 == 0 {
            return Err(Error::config("epochs and delta_t0 must be >= 1"));
        }
        if self.t_ddl.is_zero() {
            return Err(Error::config("t_ddl must be positive"));
        }
        if self.p == 0 || self.q == 0 {
            return Err(Error::config("channel capacities p and q must be >= 1"));
        }
        if !(self.mu > 0.0) {
            return Err(Error::config(format!("mu must be > 0 or inf, got {}", self.mu)));
        }
        if self.kappa.is_nan() {
            return Err(Error::config("kappa must be a number"));
        }
        if self.max_inflight == Some(0) {
            return Err(Error::config("max_inflight must be >= 1"));
        }
        self.shape.validate()
    }

    /// This configuration adapted to `mode`: single-pair modes get one
    /// worker per party.
    pub fn for_mode(&self, mode: Mode) -> Self {
        let mut c = self.clone();
        c.mode = mode;
        if mode.single_pair() {
            c.w_a = 1;
            c.w_p = 1;
        }
        c
    }

    pub fn assignment(&self) -> Assignment {
        match self.mode {
            Mode::VflPs | Mode::PureVfl => Assignment::Static,
            Mode::PubSubVfl | Mode::Avfl | Mode::AvflPs => Assignment::Dynamic,
        }
    }

    pub fn inflight(&self) -> usize {
        match self.mode {
            Mode::PureVfl | Mode::VflPs => 1,
            Mode::Avfl | Mode::AvflPs => 2,
            Mode::PubSubVfl => self.max_inflight.unwrap_or(2),
        }
    }

    /// Embedding and gradient channel depths.
    pub fn capacities(&self) -> (usize, usize) {
        match self.mode {
            Mode::PubSubVfl | Mode::PureVfl | Mode::VflPs => (self.p, self.q),
            Mode::Avfl | Mode::AvflPs => (1, 1),
        }
    }

    pub fn schedule(&self) -> SyncSchedule {
        match self.mode {
            Mode::PubSubVfl => SyncSchedule::SemiAsync {
                delta_t0: self.delta_t0,
            },
            _ => SyncSchedule::EveryEpoch,
        }
    }

    /// Applies any keys present in `kv` on top of `self`.
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        if let Some(m) = kv.get_str("mode") {
            self.mode = m.parse()?;
        }
        if let Some(o) = kv.get_str("optimizer") {
            self.optimizer = o.parse()?;
        }
        macro_rules! take {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = kv.get($key)? { $field = v; })*
            };
        }
        take! {
            "batch_size" => self.batch_size,
            "w_a" => self.w_a,
            "w_p" => self.w_p,
            "eta" => self.eta,
            "epochs" => self.epochs,
            "delta_t0" => self.delta_t0,
            "p" => self.p,
            "q" => self.q,
            "mu" => self.mu,
            "gdp_scale" => self.gdp_scale,
            "gdp_delta" => self.gdp_delta,
            "kappa" => self.kappa,
            "seed" => self.seed,
            "max_retries" => self.max_retries,
            "target_auc" => self.target_auc,
            "embedding_dim" => self.shape.embedding_dim,
        }
        if let Some(ms) = kv.get::<u64>("t_ddl_ms")? {
            self.t_ddl = Duration::from_millis(ms);
        }
        if let Some(ms) = kv.get::<u64>("skew_passive_ms")? {
            self.skew_passive = Duration::from_millis(ms);
        }
        if let Some(ms) = kv.get::<u64>("skew_active_ms")? {
            self.skew_active = Duration::from_millis(ms);
        }
        if let Some(n) = kv.get::<usize>("max_inflight")? {
            self.max_inflight = Some(n);
        }
        if let Some(s) = kv.get_str("bottom_hidden") {
            self.shape.bottom_hidden = parse_list(s)?;
        }
        if let Some(s) = kv.get_str("top_hidden") {
            self.shape.top_hidden = parse_list(s)?;
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("mode", self.mode);
        kv.set("batch_size", self.batch_size);
        kv.set("w_a", self.w_a);
        kv.set("w_p", self.w_p);
        kv.set("eta", self.eta);
        kv.set("optimizer", self.optimizer);
        kv.set("epochs", self.epochs);
        kv.set("delta_t0", self.delta_t0);
        kv.set("t_ddl_ms", self.t_ddl.as_millis());
        kv.set("p", self.p);
        kv.set("q", self.q);
        kv.set("mu", self.mu);
        kv.set("gdp_scale", self.gdp_scale);
        kv.set("gdp_delta", self.gdp_delta);
        kv.set("kappa", self.kappa);
        kv.set("seed", self.seed);
        kv.set("skew_passive_ms", self.skew_passive.as_millis());
        kv.set("skew_active_ms", self.skew_active.as_millis());
        if let Some(n) = self.max_inflight {
            kv.set("max_inflight", n);
        }
        kv.set("max_retries", self.max_retries);
        kv.set("target_auc", self.target_auc);
        kv.set("bottom_hidden", render_list(&self.shape.bottom_hidden));
        kv.set("embedding_dim", self.shape.embedding_dim);
        kv.set("top_hidden", render_list(&self.shape.top_hidden));
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("vfl-ps".parse::<Mode>().unwrap(), Mode::VflPs);
        assert!("sync".parse::<Mode>().is_err());
    }

    #[test]
    fn single_pair_modes_reject_pools() {
        let c = TrainConfig {
            mode: Mode::PureVfl,
            w_a: 2,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(c.for_mode(Mode::PureVfl).validate().is_ok());
    }

    #[test]
    fn kv_round_trip() {
        let c = TrainConfig {
            mode: Mode::AvflPs,
            optimizer: Optimizer::Adam,
            mu: 0.5,
            skew_passive: Duration::from_millis(7),
            max_inflight: Some(3),
            shape: ModelShape {
                bottom_hidden: vec![8, 4],
                embedding_dim: 3,
                top_hidden: vec![],
            },
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_kv(&KvFile::parse(&c.to_kv().render()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_values_are_errors() {
        assert!(TrainConfig::from_kv(&KvFile::parse("eta=abc").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KvFile::parse("eta=0").unwrap()).is_err());
    }
}
