//! Rate-limited, delayed, lossy publish/subscribe bus.
//!
//! Publishes faster than a topic's rate (per source) are dropped and counted
//! as rate violations. Survivors pass a seeded drop draw and are delivered
//! exactly `latency` seconds later, in publish order.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub rate_hz: f64,
    #[serde(default)]
    pub latency: f64,
    #[serde(default)]
    pub drop_probability: f64,
    /// RNG stream used for the drop draws of this topic.
    #[serde(default)]
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BusConfig {
    pub topics: BTreeMap<String, TopicConfig>,
}

impl Default for BusConfig {
    fn default() -> Self {
        let topic = |rate_hz, latency, stream| TopicConfig { rate_hz, latency, drop_probability: 0.0, stream };
        BusConfig {
            topics: [
                ("commands".to_string(), topic(10.0, 0.05, 1)),
                ("predictions".to_string(), topic(10.0, 0.02, 2)),
                ("telemetry".to_string(), topic(10.0, 0.05, 3)),
                ("worker".to_string(), topic(10.0, 0.02, 4)),
            ]
            .into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("unknown topic '{0}'")]
    UnknownTopic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublishOutcome {
    Queued,
    Dropped,
    RateViolation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BusStats {
    pub published: u64,
    pub rate_violations: u64,
    pub dropped: u64,
    /// Deliveries summed over subscribers.
    pub delivered: u64,
    pub max_delivery_delay: f64,
    /// Deliveries before publish time plus latency; zero by construction.
    pub early_deliveries: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery<M> {
    pub topic: String,
    pub seq: u64,
    pub source: u32,
    pub published: f64,
    pub delivered: f64,
    pub message: M,
}

struct Topic<M> {
    config: TopicConfig,
    rng: ChaCha8Rng,
    last_accepted: BTreeMap<u32, f64>,
    subscribers: Vec<String>,
    stats: BusStats,
    _marker: std::marker::PhantomData<M>,
}

struct InFlight<M> {
    topic: String,
    seq: u64,
    source: u32,
    published: f64,
    due: f64,
    message: M,
}

pub struct Bus<M> {
    topics: BTreeMap<String, Topic<M>>,
    mailboxes: BTreeMap<String, VecDeque<InFlight<M>>>,
    seq: u64,
}

impl<M: Clone> Bus<M> {
    pub fn new(config: &BusConfig, seed: u64) -> Self {
        let topics = config
            .topics
            .iter()
            .map(|(name, c)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c.stream);
                let t = Topic {
                    config: c.clone(),
                    rng,
                    last_accepted: BTreeMap::new(),
                    subscribers: Vec::new(),
                    stats: BusStats::default(),
                    _marker: std::marker::PhantomData,
                };
                (name.clone(), t)
            })
            .collect();
        Bus { topics, mailboxes: BTreeMap::new(), seq: 0 }
    }

    pub fn has_topic(&self, topic: &str) -> bool {
        self.topics.contains_key(topic)
    }

    pub fn subscribe(&mut self, topic: &str, subscriber: &str) -> Result<(), BusError> {
        let t = self.topics.get_mut(topic).ok_or_else(|| BusError::UnknownTopic(topic.into()))?;
        if !t.subscribers.iter().any(|s| s == subscriber) {
            t.subscribers.push(subscriber.into());
        }
        self.mailboxes.entry(subscriber.into()).or_default();
        Ok(())
    }

    pub fn publish(&mut self, topic: &str, source: u32, message: M, time: f64) -> Result<PublishOutcome, BusError> {
        let t = self.topics.get_mut(topic).ok_or_else(|| BusError::UnknownTopic(topic.into()))?;
        t.stats.published += 1;
        let period = 1.0 / t.config.rate_hz;
        if let Some(last) = t.last_accepted.get(&source) {
            if time - last < period - 1e-9 {
                t.stats.rate_violations += 1;
                log::debug!("rate violation on {topic} from {source} at t={time}");
                return Ok(PublishOutcome::RateViolation);
            }
        }
        t.last_accepted.insert(source, time);
        // one draw per accepted publish keeps the stream aligned across runs
        let u: f64 = t.rng.random();
        if u < t.config.drop_probability {
            t.stats.dropped += 1;
            return Ok(PublishOutcome::Dropped);
        }
        self.seq += 1;
        let due = time + t.config.latency;
        for s in &t.subscribers {
            self.mailboxes.get_mut(s).expect("subscriber has a mailbox").push_back(InFlight {
                topic: topic.into(),
                seq: self.seq,
                source,
                published: time,
                due,
                message: message.clone(),
            });
        }
        Ok(PublishOutcome::Queued)
    }

    /// Messages due for `subscriber` by `time`, ordered by due time then
    /// publish order.
    pub fn poll(&mut self, subscriber: &str, time: f64) -> Vec<Delivery<M>> {
        let Some(mb) = self.mailboxes.get_mut(subscriber) else { return Vec::new() };
        let mut out = Vec::new();
        let mut keep = VecDeque::with_capacity(mb.len());
        for m in mb.drain(..) {
            if m.due <= time + 1e-9 {
                out.push(m);
            } else {
                keep.push_back(m);
            }
        }
        *mb = keep;
        out.sort_by(|a, b| a.due.total_cmp(&b.due).then(a.seq.cmp(&b.seq)));
        out.into_iter()
            .map(|m| {
                let t = self.topics.get_mut(&m.topic).expect("topic exists");
                t.stats.delivered += 1;
                let delay = time - m.published;
                t.stats.max_delivery_delay = t.stats.max_delivery_delay.max(delay);
                if delay < t.config.latency - 1e-9 {
                    t.stats.early_deliveries += 1;
                }
                Delivery { topic: m.topic, seq: m.seq, source: m.source, published: m.published, delivered: time, message: m.message }
            })
            .collect()
    }

    pub fn stats(&self) -> BTreeMap<String, BusStats> {
        self.topics.iter().map(|(n, t)| (n.clone(), t.stats.clone())).collect()
    }
}
