//! Classical baselines evaluated under the same protocol as the model:
//! global popularity, within-session popularity, and cosine-style item
//! co-occurrence similarity over binary session-item incidence.

use std::collections::HashMap;

use crate::data::Session;
use crate::error::{FgnnError, Result};
use crate::eval::Ranker;

pub const DEFAULT_KNN_LAMBDA: f64 = 20.0;

/// Item indices ordered by descending train frequency, ties by
/// ascending index.
fn popularity_order(counts: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

/// Always recommends the most popular items of the whole training set.
pub struct PopRanker {
    order: Vec<usize>,
    rank_of: Vec<usize>,
}

impl PopRanker {
    pub fn fit(train_sessions: &[Session], vocab_size: usize) -> Result<Self> {
        if train_sessions.is_empty() {
            return Err(FgnnError::Usage("POP needs a non-empty train set".into()));
        }
        let mut counts = vec![0usize; vocab_size];
        for session in train_sessions {
            for &item in &session.items {
                counts[item] += 1;
            }
        }
        let order = popularity_order(&counts);
        let mut rank_of = vec![0usize; vocab_size];
        for (rank, &item) in order.iter().enumerate() {
            rank_of[item] = rank;
        }
        Ok(PopRanker { order, rank_of })
    }

    pub fn global_rank(&self, item: usize) -> usize {
        self.rank_of[item]
    }
}

impl Ranker for PopRanker {
    fn name(&self) -> &str {
        "pop"
    }

    fn rank(&self, _prefix: &[usize], k: usize) -> Result<Vec<usize>> {
        Ok(self.order.iter().take(k).copied().collect())
    }
}

/// Most popular items of the current session first (by within-prefix
/// frequency, ties by global popularity), backfilled with the global
/// popularity order.
pub struct SPopRanker {
    pop: PopRanker,
}

impl SPopRanker {
    pub fn fit(train_sessions: &[Session], vocab_size: usize) -> Result<Self> {
        Ok(SPopRanker {
            pop: PopRanker::fit(train_sessions, vocab_size)?,
        })
    }
}

impl Ranker for SPopRanker {
    fn name(&self) -> &str {
        "s-pop"
    }

    fn rank(&self, prefix: &[usize], k: usize) -> Result<Vec<usize>> {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &item in prefix {
            *counts.entry(item).or_insert(0) += 1;
        }
        let mut seen: Vec<usize> = counts.keys().copied().collect();
        seen.sort_by(|&a, &b| {
            counts[&b]
                .cmp(&counts[&a])
                .then(self.pop.global_rank(a).cmp(&self.pop.global_rank(b)))
                .then(a.cmp(&b))
        });
        let mut out: Vec<usize> = seen.into_iter().take(k).collect();
        if out.len() < k {
            for &item in &self.pop.order {
                if !counts.contains_key(&item) {
                    out.push(item);
                    if out.len() == k {
                        break;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Item-item cosine over binary session incidence with additive
/// regularization against rarely-seen high similarities:
///   sim(i, j) = cooc(i, j) / (√supp(i)·√supp(j) + λ).
/// A prefix scores candidates by summing similarity over its distinct
/// items.
pub struct ItemKnnRanker {
    vocab_size: usize,
    support: Vec<usize>,
    /// Co-occurrence counts keyed by (min, max) item pair.
    cooc: HashMap<(usize, usize), usize>,
    lambda: f64,
    /// Exclude items already present in the prefix from recommendations.
    pub exclude_seen: bool,
    fallback_order: Vec<usize>,
}

impl ItemKnnRanker {
    pub fn fit(train_sessions: &[Session], vocab_size: usize, lambda: f64) -> Result<Self> {
        if train_sessions.is_empty() {
            return Err(FgnnError::Usage(
                "Item-KNN needs a non-empty train set".into(),
            ));
        }
        if lambda < 0.0 {
            return Err(FgnnError::Usage(format!(
                "Item-KNN regularization must be >= 0, got {lambda}"
            )));
        }
        let mut support = vec![0usize; vocab_size];
        let mut cooc: HashMap<(usize, usize), usize> = HashMap::new();
        let mut counts = vec![0usize; vocab_size];
        for session in train_sessions {
            let mut distinct: Vec<usize> = session.items.clone();
            distinct.sort_unstable();
            distinct.dedup();
            for &item in &distinct {
                support[item] += 1;
            }
            for &item in &session.items {
                counts[item] += 1;
            }
            for (a, &i) in distinct.iter().enumerate() {
                for &j in &distinct[a + 1..] {
                    *cooc.entry((i, j)).or_insert(0) += 1;
                }
            }
        }
        Ok(ItemKnnRanker {
            vocab_size,
            support,
            cooc,
            lambda,
            exclude_seen: false,
            fallback_order: popularity_order(&counts),
        })
    }

    pub fn with_exclude_seen(mut self, exclude: bool) -> Self {
        self.exclude_seen = exclude;
        self
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        if i == j || i >= self.vocab_size || j >= self.vocab_size {
            return 0.0;
        }
        let key = (i.min(j), i.max(j));
        let joint = *self.cooc.get(&key).unwrap_or(&0) as f64;
        if joint == 0.0 {
            return 0.0;
        }
        let denom = (self.support[i] as f64).sqrt() * (self.support[j] as f64).sqrt() + self.lambda;
        joint / denom
    }
}

impl Ranker for ItemKnnRanker {
    fn name(&self) -> &str {
        "item-knn"
    }

    fn rank(&self, prefix: &[usize], k: usize) -> Result<Vec<usize>> {
        let mut distinct: Vec<usize> = prefix.to_vec();
        distinct.sort_unstable();
        distinct.dedup();

        let mut scores = vec![0.0f64; self.vocab_size];
        for &seen in &distinct {
            for (candidate, score) in scores.iter_mut().enumerate() {
                let sim = self.similarity(seen, candidate);
                if sim > 0.0 {
                    *score += sim;
                }
            }
        }
        let mut order: Vec<usize> = (0..self.vocab_size).collect();
        // Descending score, zero-score items by popularity, ties by index.
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    let pa = self.fallback_order.iter().position(|&x| x == a);
                    let pb = self.fallback_order.iter().position(|&x| x == b);
                    pa.cmp(&pb)
                })
                .then(a.cmp(&b))
        });
        let filtered: Vec<usize> = if self.exclude_seen {
            order
                .into_iter()
                .filter(|item| !distinct.contains(item))
                .take(k)
                .collect()
        } else {
            order.into_iter().take(k).collect()
        };
        Ok(filtered)
    }
}
