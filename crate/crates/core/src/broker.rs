//! In-process publish/subscribe broker with one embedding channel and one
//! gradient channel per batch id.
//!
//! Each channel is a bounded FIFO. Publishing into a full channel silently
//! evicts the oldest message. Subscribing consumes the oldest message, blocking
//! up to a deadline. Channels lock independently; there is no broker-wide lock.
//! Every payload is charged to the byte counter at its wire size (see
//! [`DenseMatrix::to_wire`]).

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum MessageKind {
    Embedding,
    Gradient,
}

#[derive(Clone, Debug)]
pub struct ChannelMessage {
    pub batch_id: usize,
    pub epoch: usize,
    pub kind: MessageKind,
    pub payload: DenseMatrix,
    pub sample_range: Range<usize>,
    pub sender_worker: usize,
    /// Set by the broker on publish.
    pub publish_time: Instant,
    pub param_version: u64,
    /// Whether privacy noise has been applied to the payload.
    pub noised: bool,
}

impl ChannelMessage {
    pub fn new(
        kind: MessageKind,
        batch_id: usize,
        epoch: usize,
        payload: DenseMatrix,
        sample_range: Range<usize>,
        sender_worker: usize,
        param_version: u64,
    ) -> Self {
        Self {
            batch_id,
            epoch,
            kind,
            payload,
            sample_range,
            sender_worker,
            publish_time: Instant::now(),
            param_version,
            noised: false,
        }
    }
}

#[derive(Debug)]
pub enum SubscribeOutcome {
    Message(ChannelMessage),
    DeadlineExpired,
}

/// Result of one subscribe call together with the time spent blocked.
#[derive(Debug)]
pub struct Subscription {
    pub outcome: SubscribeOutcome,
    pub waited: Duration,
}

impl Subscription {
    pub fn message(self) -> Option<ChannelMessage> {
        match self.outcome {
            SubscribeOutcome::Message(m) => Some(m),
            SubscribeOutcome::DeadlineExpired => None,
        }
    }

    pub fn expired(&self) -> bool {
        matches!(self.outcome, SubscribeOutcome::DeadlineExpired)
    }
}

#[derive(Debug, Default)]
struct ChannelState {
    queue: VecDeque<ChannelMessage>,
    evicted: u64,
}

#[derive(Debug)]
struct ChannelBuffer {
    capacity: usize,
    state: Mutex<ChannelState>,
    ready: Condvar,
}

impl ChannelBuffer {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            state: Mutex::new(ChannelState::default()),
            ready: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, ChannelState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Counter snapshot. At quiescence
/// `published == delivered + evicted + stale_rejected + discarded + residual`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BrokerStats {
    pub published: u64,
    pub delivered: u64,
    pub evicted: u64,
    pub stale_rejected: u64,
    pub discarded: u64,
    pub residual: u64,
    pub bytes_published: u64,
}

#[derive(Debug, Default)]
struct Counters {
    published: AtomicU64,
    delivered: AtomicU64,
    evicted: AtomicU64,
    stale_rejected: AtomicU64,
    discarded: AtomicU64,
    bytes: AtomicU64,
}

#[derive(Debug)]
pub struct Broker {
    embedding: Vec<ChannelBuffer>,
    gradient: Vec<ChannelBuffer>,
    counters: Counters,
    staleness_bound: Option<u64>,
}

/// `⌈n/B⌉`: the number of channels of each kind.
pub fn channel_count_for(n: usize, batch_size: usize) -> Result<usize> {
    crate::data::num_batches(n, batch_size)
}

impl Broker {
    /// `channels` embedding channels of capacity `p` and as many gradient
    /// channels of capacity `q`.
    pub fn new(channels: usize, p: usize, q: usize) -> Result<Self> {
        if channels == 0 || p == 0 || q == 0 {
            return Err(Error::config(format!(
                "broker needs >= 1 channel and capacities >= 1 (channels={channels}, p={p}, q={q})"
            )));
        }
        Ok(Self {
            embedding: (0..channels).map(|_| ChannelBuffer::new(p)).collect(),
            gradient: (0..channels).map(|_| ChannelBuffer::new(q)).collect(),
            counters: Counters::default(),
            staleness_bound: None,
        })
    }

    /// Reject messages whose `param_version` lags the subscriber's by more
    /// than `bound`.
    pub fn with_staleness_bound(mut self, bound: Option<u64>) -> Self {
        self.staleness_bound = bound;
        self
    }

    pub fn channel_count(&self) -> usize {
        self.embedding.len()
    }

    fn channel(&self, kind: MessageKind, batch_id: usize) -> Result<&ChannelBuffer> {
        let set = match kind {
            MessageKind::Embedding => &self.embedding,
            MessageKind::Gradient => &self.gradient,
        };
        set.get(batch_id).ok_or(Error::UnknownBatch {
            batch_id,
            channels: set.len(),
        })
    }

    pub fn publish(&self, mut message: ChannelMessage) -> Result<()> {
        let channel = self.channel(message.kind, message.batch_id)?;
        if message.payload.rows() != message.sample_range.len() {
            return Err(Error::shape(
                "publish",
                format!("{} payload rows", message.sample_range.len()),
                message.payload.rows(),
            ));
        }
        let bytes = message.payload.wire_len() as u64;
        {
            let mut state = channel.lock();
            message.publish_time = Instant::now();
            if state.queue.len() >= channel.capacity {
                state.queue.pop_front();
                state.evicted += 1;
                self.counters.evicted.fetch_add(1, Ordering::Relaxed);
            }
            state.queue.push_back(message);
            self.counters.published.fetch_add(1, Ordering::Relaxed);
            self.counters.bytes.fetch_add(bytes, Ordering::Relaxed);
        }
        channel.ready.notify_all();
        Ok(())
    }

    /// Blocks up to `timeout` for the oldest message on a channel.
    pub fn subscribe(&self, kind: MessageKind, batch_id: usize, timeout: Duration) -> Result<Subscription> {
        self.subscribe_until(kind, batch_id, Instant::now() + timeout, 0)
    }

    /// Blocks until `deadline` for the oldest acceptable message.
    /// `subscriber_version` is only consulted when a staleness bound is set.
    pub fn subscribe_until(
        &self,
        kind: MessageKind,
        batch_id: usize,
        deadline: Instant,
        subscriber_version: u64,
    ) -> Result<Subscription> {
        let channel = self.channel(kind, batch_id)?;
        let start = Instant::now();
        let mut state = channel.lock();
        loop {
            while let Some(msg) = state.queue.pop_front() {
                if self.is_stale(&msg, subscriber_version) {
                    self.counters.stale_rejected.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                self.counters.delivered.fetch_add(1, Ordering::Relaxed);
                return Ok(Subscription {
                    outcome: SubscribeOutcome::Message(msg),
                    waited: start.elapsed(),
                });
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Subscription {
                    outcome: SubscribeOutcome::DeadlineExpired,
                    waited: now - start,
                });
            }
            state = channel
                .ready
                .wait_timeout(state, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Non-blocking variant of [`Broker::subscribe`].
    pub fn try_subscribe(&self, kind: MessageKind, batch_id: usize, subscriber_version: u64) -> Result<Option<ChannelMessage>> {
        let sub = self.subscribe_until(kind, batch_id, Instant::now(), subscriber_version)?;
        Ok(sub.message())
    }

    fn is_stale(&self, msg: &ChannelMessage, subscriber_version: u64) -> bool {
        match self.staleness_bound {
            Some(bound) => subscriber_version.saturating_sub(msg.param_version) > bound,
            None => false,
        }
    }

    pub fn queue_len(&self, kind: MessageKind, batch_id: usize) -> Result<usize> {
        Ok(self.channel(kind, batch_id)?.lock().queue.len())
    }

    /// Evictions recorded on one channel.
    pub fn evicted_on(&self, kind: MessageKind, batch_id: usize) -> Result<u64> {
        Ok(self.channel(kind, batch_id)?.lock().evicted)
    }

    /// Publish times currently buffered on a channel, oldest first.
    pub fn buffered_times(&self, kind: MessageKind, batch_id: usize) -> Result<Vec<Instant>> {
        Ok(self
            .channel(kind, batch_id)?
            .lock()
            .queue
            .iter()
            .map(|m| m.publish_time)
            .collect())
    }

    /// Drops every buffered message (used between epochs) and returns how
    /// many were dropped.
    pub fn drain(&self) -> u64 {
        let mut dropped = 0;
        for ch in self.embedding.iter().chain(&self.gradient) {
            let mut state = ch.lock();
            dropped += state.queue.len() as u64;
            state.queue.clear();
        }
        self.counters.discarded.fetch_add(dropped, Ordering::Relaxed);
        dropped
    }

    pub fn bytes_published(&self) -> u64 {
        self.counters.bytes.load(Ordering::Relaxed)
    }

    pub fn stats(&self) -> BrokerStats {
        let residual = self
            .embedding
            .iter()
            .chain(&self.gradient)
            .map(|c| c.lock().queue.len() as u64)
            .sum();
        BrokerStats {
            published: self.counters.published.load(Ordering::Relaxed),
            delivered: self.counters.delivered.load(Ordering::Relaxed),
            evicted: self.counters.evicted.load(Ordering::Relaxed),
            stale_rejected: self.counters.stale_rejected.load(Ordering::Relaxed),
            discarded: self.counters.discarded.load(Ordering::Relaxed),
            residual,
            bytes_published: self.counters.bytes.load(Ordering::Relaxed),
        }
    }
}
