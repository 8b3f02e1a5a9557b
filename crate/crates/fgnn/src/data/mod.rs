//! Dataset construction: grouping clicks into sessions, the two-pass
//! support/length filter, prefix augmentation, temporal train/test
//! splits, and on-disk persistence of processed datasets.

mod formats;
pub mod synth;

pub use formats::{load_events, LoadOutcome, LogFormat, RawEvent};

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{FgnnError, Result};

/// An ordered list of item indices; duplicates allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub items: Vec<usize>,
}

/// One supervised example: a non-empty prefix and the item that
/// followed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub prefix: Vec<usize>,
    pub label: usize,
}

/// Bijection between opaque item keys and dense indices `0..m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemVocabulary {
    key_to_index: HashMap<String, usize>,
    index_to_key: Vec<String>,
}

impl ItemVocabulary {
    pub fn from_keys(keys: Vec<String>) -> Result<Self> {
        let mut key_to_index = HashMap::with_capacity(keys.len());
        for (index, key) in keys.iter().enumerate() {
            if key_to_index.insert(key.clone(), index).is_some() {
                return Err(FgnnError::Data(format!("duplicate item key '{key}'")));
            }
        }
        Ok(ItemVocabulary {
            key_to_index,
            index_to_key: keys,
        })
    }

    pub fn len(&self) -> usize {
        self.index_to_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_key.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.key_to_index.get(key).copied()
    }

    pub fn key_of(&self, index: usize) -> Option<&str> {
        self.index_to_key.get(index).map(String::as_str)
    }

    pub fn keys(&self) -> &[String] {
        &self.index_to_key
    }
}

/// A session still carrying its opaque keys, before vocabulary mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyedSession {
    pub session_key: String,
    pub item_keys: Vec<String>,
    pub last_timestamp_ms: i64,
}

/// Group events by session key (click order within a session is
/// timestamp order, ties broken by input order) and order sessions by
/// their last event, oldest first. That ordering defines recency for
/// the temporal split.
pub fn sessionize(events: &[RawEvent]) -> Vec<KeyedSession> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(i64, usize, &str)>> = HashMap::new();
    for (position, event) in events.iter().enumerate() {
        groups
            .entry(event.session_key.clone())
            .or_insert_with(|| {
                order.push(event.session_key.clone());
                Vec::new()
            })
            .push((event.timestamp_ms, position, &event.item_key));
    }

    let mut sessions: Vec<KeyedSession> = order
        .into_iter()
        .map(|session_key| {
            let mut clicks = groups.remove(&session_key).expect("grouped above");
            clicks.sort_by_key(|&(ts, position, _)| (ts, position));
            let last_timestamp_ms = clicks.last().expect("non-empty group").0;
            KeyedSession {
                session_key,
                item_keys: clicks
                    .into_iter()
                    .map(|(_, _, item)| item.to_string())
                    .collect(),
                last_timestamp_ms,
            }
        })
        .collect();
    // Stable: equal last timestamps keep first-appearance order.
    sessions.sort_by_key(|s| s.last_timestamp_ms);
    sessions
}

pub const DEFAULT_MIN_ITEM_SUPPORT: usize = 5;
pub const DEFAULT_MIN_SESSION_LEN: usize = 2;

/// Two passes, run once (no fixpoint iteration): drop items that occur
/// fewer than `min_item_support` times across all sessions, then drop
/// sessions left shorter than `min_session_len`. The vocabulary indexes
/// surviving items in first-appearance order.
///
/// Supports are counted before the length pass, so when that pass drops
/// a session, re-filtering the output could remove further items; the
/// output is a fixed point exactly when no session was dropped.
pub fn filter(
    sessions: &[KeyedSession],
    min_item_support: usize,
    min_session_len: usize,
) -> Result<(Vec<Session>, ItemVocabulary)> {
    let mut occurrences: HashMap<&str, usize> = HashMap::new();
    for session in sessions {
        for key in &session.item_keys {
            *occurrences.entry(key).or_insert(0) += 1;
        }
    }

    let mut keys: Vec<String> = Vec::new();
    let mut key_to_index: HashMap<String, usize> = HashMap::new();
    let mut kept: Vec<Session> = Vec::new();
    for session in sessions {
        let surviving: Vec<&String> = session
            .item_keys
            .iter()
            .filter(|key| occurrences[key.as_str()] >= min_item_support)
            .collect();
        if surviving.len() < min_session_len {
            continue;
        }
        let items = surviving
            .into_iter()
            .map(|key| {
                *key_to_index.entry(key.clone()).or_insert_with(|| {
                    keys.push(key.clone());
                    keys.len() - 1
                })
            })
            .collect();
        kept.push(Session { items });
    }

    if kept.is_empty() {
        return Err(FgnnError::EmptyInput(
            "filtering removed every session".into(),
        ));
    }
    Ok((kept, ItemVocabulary::from_keys(keys)?))
}

/// A session of length n yields exactly n−1 (prefix, next-item)
/// examples; the label never appears inside its prefix slot.
pub fn augment(session: &Session) -> Result<Vec<TrainingExample>> {
    let n = session.items.len();
    if n < 2 {
        return Err(FgnnError::Contract(format!(
            "augmentation needs a session of length >= 2, got {n}"
        )));
    }
    Ok((1..n)
        .map(|i| TrainingExample {
            prefix: session.items[..i].to_vec(),
            label: session.items[i],
        })
        .collect())
}

/// Table-style corpus statistics, recomputable from the split sessions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetStats {
    pub clicks: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub items: usize,
    pub avg_length: f64,
    pub train_examples: usize,
    pub test_examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train_examples: Vec<TrainingExample>,
    pub test_examples: Vec<TrainingExample>,
    pub train_sessions: Vec<Session>,
    pub test_sessions: Vec<Session>,
    pub vocab: ItemVocabulary,
    pub stats: DatasetStats,
    /// Test examples dropped because their label never occurs in a
    /// train session.
    pub dropped_test_examples: usize,
}

impl Dataset {
    pub fn compute_stats(
        train_sessions: &[Session],
        test_sessions: &[Session],
        vocab_len: usize,
        train_examples: usize,
        test_examples: usize,
    ) -> DatasetStats {
        let clicks: usize = train_sessions
            .iter()
            .chain(test_sessions)
            .map(|s| s.items.len())
            .sum();
        let session_count = train_sessions.len() + test_sessions.len();
        DatasetStats {
            clicks,
            train_sessions: train_sessions.len(),
            test_sessions: test_sessions.len(),
            items: vocab_len,
            avg_length: clicks as f64 / session_count.max(1) as f64,
            train_examples,
            test_examples,
        }
    }
}

/// Split recency-ordered sessions: the most recent ⌈test_fraction·N⌉
/// become test; of the remainder, the most recent
/// ⌈train_recency_fraction·rest⌉ become train (this realizes
/// most-recent-1/64-style trimming). Both sides are augmented; test
/// examples whose label is absent from the train sessions are dropped
/// and counted.
pub fn temporal_split(
    sessions: Vec<Session>,
    vocab: ItemVocabulary,
    test_fraction: f64,
    train_recency_fraction: f64,
) -> Result<Dataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(FgnnError::Usage(format!(
            "test_fraction {test_fraction} outside (0, 1)"
        )));
    }
    if !(train_recency_fraction > 0.0 && train_recency_fraction <= 1.0) {
        return Err(FgnnError::Usage(format!(
            "train_recency_fraction {train_recency_fraction} outside (0, 1]"
        )));
    }

    let total = sessions.len();
    let n_test = ((test_fraction * total as f64).ceil() as usize).min(total);
    let split_at = total - n_test;
    let (older, test_slice) = sessions.split_at(split_at);
    let n_train = ((train_recency_fraction * older.len() as f64).ceil() as usize).min(older.len());
    let train_sessions: Vec<Session> = older[older.len() - n_train..].to_vec();
    let test_sessions: Vec<Session> = test_slice.to_vec();

    let mut train_examples = Vec::new();
    for session in &train_sessions {
        train_examples.extend(augment(session)?);
    }

    let train_items: HashSet<usize> = train_sessions
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .collect();
    let mut test_examples = Vec::new();
    let mut dropped = 0usize;
    for session in &test_sessions {
        for example in augment(session)? {
            if train_items.contains(&example.label) {
                test_examples.push(example);
            } else {
                dropped += 1;
            }
        }
    }

    let stats = Dataset::compute_stats(
        &train_sessions,
        &test_sessions,
        vocab.len(),
        train_examples.len(),
        test_examples.len(),
    );
    Ok(Dataset {
        train_examples,
        test_examples,
        train_sessions,
        test_sessions,
        vocab,
        stats,
        dropped_test_examples: dropped,
    })
}

// ── Persistence ──────────────────────────────────────────────────────

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct DatasetManifest {
    format_version: u32,
    vocab: Vec<String>,
    stats: DatasetStats,
    dropped_test_examples: usize,
    files: ManifestFiles,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ManifestFiles {
    train_examples: String,
    test_examples: String,
    train_sessions: String,
    test_sessions: String,
}

const MANIFEST_VERSION: u32 = 1;

impl Dataset {
    /// Write `manifest.json`, the two line-oriented example files
    /// (`prefix items space-separated TAB label`), and the split session
    /// files. Output bytes are a pure function of the dataset.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            vocab: self.vocab.keys().to_vec(),
            stats: self.stats.clone(),
            dropped_test_examples: self.dropped_test_examples,
            files: ManifestFiles {
                train_examples: "train.txt".into(),
                test_examples: "test.txt".into(),
                train_sessions: "train_sessions.txt".into(),
                test_sessions: "test_sessions.txt".into(),
            },
        };
        let mut manifest_json = serde_json::to_string_pretty(&manifest)?;
        manifest_json.push('\n');
        std::fs::write(dir.join("manifest.json"), manifest_json)?;
        write_examples(&dir.join("train.txt"), &self.train_examples)?;
        write_examples(&dir.join("test.txt"), &self.test_examples)?;
        write_sessions(&dir.join("train_sessions.txt"), &self.train_sessions)?;
        write_sessions(&dir.join("test_sessions.txt"), &self.test_sessions)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path).map_err(|e| {
                FgnnError::Data(format!("cannot read {}: {e}", manifest_path.display()))
            })?)
            .map_err(|e| FgnnError::Integrity(format!("manifest.json: {e}")))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(FgnnError::Integrity(format!(
                "manifest.json: unsupported format version {}",
                manifest.format_version
            )));
        }
        let vocab = ItemVocabulary::from_keys(manifest.vocab)?;
        let m = vocab.len();
        let train_examples = read_examples(&dir.join(&manifest.files.train_examples), m)?;
        let test_examples = read_examples(&dir.join(&manifest.files.test_examples), m)?;
        let train_sessions = read_sessions(&dir.join(&manifest.files.train_sessions), m)?;
        let test_sessions = read_sessions(&dir.join(&manifest.files.test_sessions), m)?;

        let recomputed = Dataset::compute_stats(
            &train_sessions,
            &test_sessions,
            m,
            train_examples.len(),
            test_examples.len(),
        );
        if recomputed != manifest.stats {
            return Err(FgnnError::Integrity(
                "manifest stats do not match file contents".into(),
            ));
        }
        Ok(Dataset {
            train_examples,
            test_examples,
            train_sessions,
            test_sessions,
            vocab,
            stats: recomputed,
            dropped_test_examples: manifest.dropped_test_examples,
        })
    }
}

fn write_examples(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for example in examples {
        let prefix: Vec<String> = example.prefix.iter().map(ToString::to_string).collect();
        writeln!(out, "{}\t{}", prefix.join(" "), example.label)?;
    }
    out.flush()?;
    Ok(())
}

fn read_examples(path: &Path, vocab_len: usize) -> Result<Vec<TrainingExample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| FgnnError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut examples = Vec::new();
    for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad_line = || {
            FgnnError::Integrity(format!(
                "{}:{}: malformed example line",
                path.display(),
                line_no + 1
            ))
        };
        let (prefix_part, label_part) = line.split_once('\t').ok_or_else(bad_line)?;
        let prefix: Vec<usize> = prefix_part
            .split(' ')
            .map(|tok| tok.parse::<usize>().map_err(|_| bad_line()))
            .collect::<Result<_>>()?;
        let label: usize = label_part.parse().map_err(|_| bad_line())?;
        if prefix.is_empty() || label >= vocab_len || prefix.iter().any(|&i| i >= vocab_len) {
            return Err(bad_line());
        }
        examples.push(TrainingExample { prefix, label });
    }
    Ok(examples)
}

fn write_sessions(path: &Path, sessions: &[Session]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for session in sessions {
        let items: Vec<String> = session.items.iter().map(ToString::to_string).collect();
        writeln!(out, "{}", items.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn read_sessions(path: &Path, vocab_len: usize) -> Result<Vec<Session>> {
    let file = std::fs::File::open(path)
        .map_err(|e| FgnnError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut sessions = Vec::new();
    for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let items: Vec<usize> = line
            .split(' ')
            .map(|tok| {
                tok.parse::<usize>().map_err(|_| {
                    FgnnError::Integrity(format!(
                        "{}:{}: malformed session line",
                        path.display(),
                        line_no + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if items.iter().any(|&i| i >= vocab_len) {
            return Err(FgnnError::Integrity(format!(
                "{}:{}: item index outside vocabulary",
                path.display(),
                line_no + 1
            )));
        }
        sessions.push(Session { items });
    }
    Ok(sessions)
}
