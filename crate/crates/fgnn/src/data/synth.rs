//! Synthetic session corpora from a seeded first-order Markov chain.
//!
//! Each item concentrates its transition mass on a small set of likely
//! successors, so the corpus carries learnable structure at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{RawEvent, Session};
use crate::error::{FgnnError, Result};

/// Smoothing mass spread uniformly over all items so every transition
/// stays possible.
const SMOOTHING: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of the item set each row concentrates its mass on;
    /// 1.0 makes the next-item distribution uniform.
    pub transition_concentration: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items < 2 {
            return Err(FgnnError::Usage("synth needs at least 2 items".into()));
        }
        if self.n_sessions == 0 {
            return Err(FgnnError::Usage("synth needs at least 1 session".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(FgnnError::Usage(format!(
                "invalid session length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(self.transition_concentration > 0.0 && self.transition_concentration <= 1.0) {
            return Err(FgnnError::Usage(format!(
                "transition_concentration {} outside (0, 1]",
                self.transition_concentration
            )));
        }
        Ok(())
    }
}

/// The sampled chain: per-item successor sets, plus the sessions drawn
/// from it. Identical seeds produce identical corpora.
pub fn generate(config: &SynthConfig) -> Result<Vec<Session>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_items;
    let fanout = ((config.transition_concentration * n as f64).ceil() as usize).clamp(1, n);

    // Successor sets: a partial Fisher-Yates draw per item.
    let successors: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..fanout {
                let j = rng.gen_range(i..n);
                pool.swap(i, j);
            }
            pool.truncate(fanout);
            pool
        })
        .collect();

    let sample_next = |current: usize, rng: &mut ChaCha8Rng| -> usize {
        if rng.gen_range(0.0..1.0) < SMOOTHING {
            rng.gen_range(0..n)
        } else {
            successors[current][rng.gen_range(0..fanout)]
        }
    };

    let sessions = (0..config.n_sessions)
        .map(|_| {
            let len = rng.gen_range(config.min_len..=config.max_len);
            let mut items = Vec::with_capacity(len);
            let mut current = rng.gen_range(0..n);
            items.push(current);
            for _ in 1..len {
                current = sample_next(current, &mut rng);
                items.push(current);
            }
            Session { items }
        })
        .collect();
    Ok(sessions)
}

/// Render synthetic sessions as canonical click events: items become
/// keys `item<i>`, timestamps step by a second within a session and
/// sessions are spaced far enough apart that recency order equals
/// generation order.
pub fn to_events(sessions: &[Session]) -> Vec<RawEvent> {
    let mut events = Vec::new();
    for (s, session) in sessions.iter().enumerate() {
        let base = (s as i64) * 100_000;
        for (i, &item) in session.items.iter().enumerate() {
            events.push(RawEvent {
                session_key: format!("s{s}"),
                timestamp_ms: base + (i as i64) * 1_000,
                item_key: format!("item{item}"),
            });
        }
    }
    events
}

/// Canonical CSV bytes for a synthetic corpus.
pub fn to_canonical_csv(sessions: &[Session]) -> String {
    let mut out = String::from("session_id,timestamp_ms,item_id\n");
    for event in to_events(sessions) {
        out.push_str(&format!(
            "{},{},{}\n",
            event.session_key, event.timestamp_ms, event.item_key
        ));
    }
    out
}
