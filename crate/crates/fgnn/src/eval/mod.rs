//! Top-K ranking metrics and the evaluation harness shared by the model
//! and the classical baselines.
//!
//! R@K is the fraction of test cases whose label lands in the top K.
//! MRR@K averages 1/rank with the rank counted from 1 inside the top-K
//! list and the reciprocal zeroed outside it, so MRR@K ≤ R@K always.

pub mod baselines;

pub use baselines::{ItemKnnRanker, PopRanker, SPopRanker};

use crate::data::TrainingExample;
use crate::error::{FgnnError, Result};
use crate::model::{forward, predict_topk, ModelParams};

/// Anything that can rank the whole vocabulary for a session prefix.
pub trait Ranker {
    fn name(&self) -> &str;
    /// The top `k` item indices for this prefix, best first.
    fn rank(&self, prefix: &[usize], k: usize) -> Result<Vec<usize>>;
}

/// The trained model as a ranker.
pub struct ModelRanker<'a> {
    pub params: &'a ModelParams,
}

impl Ranker for ModelRanker<'_> {
    fn name(&self) -> &str {
        "fgnn"
    }

    fn rank(&self, prefix: &[usize], k: usize) -> Result<Vec<usize>> {
        let result = forward(self.params, prefix)?;
        // A K beyond the vocabulary means "rank everything".
        let k = k.min(result.ranking.len());
        Ok(predict_topk(&result, k)?.to_vec())
    }
}

/// Proportion of cases whose label appears in its top-K list.
pub fn recall_at_k(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    check_metric_inputs(rankings, labels)?;
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(ranking, label)| ranking.iter().take(k).any(|item| item == *label))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean reciprocal rank, zeroed outside the top K.
pub fn mrr_at_k(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    check_metric_inputs(rankings, labels)?;
    let total: f64 = rankings
        .iter()
        .zip(labels)
        .map(
            |(ranking, label)| match ranking.iter().take(k).position(|item| item == label) {
                Some(position) => 1.0 / (position + 1) as f64,
                None => 0.0,
            },
        )
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_metric_inputs(rankings: &[Vec<usize>], labels: &[usize]) -> Result<()> {
    if rankings.is_empty() || rankings.len() != labels.len() {
        return Err(FgnnError::Usage(format!(
            "metrics need matching non-empty rankings and labels ({} vs {})",
            rankings.len(),
            labels.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub mrr: f64,
}

/// One method's metrics at each requested K.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n_test: usize,
    pub at_k: Vec<KMetrics>,
}

impl EvalReport {
    /// JSON lines, one per (method, K).
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for km in &self.at_k {
            let line = serde_json::json!({
                "method": self.method,
                "k": km.k,
                "recall": km.recall,
                "mrr": km.mrr,
                "n_test": self.n_test,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn metrics_at(&self, k: usize) -> Option<&KMetrics> {
        self.at_k.iter().find(|m| m.k == k)
    }
}

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// Rank every test prefix and score it at each K.
pub fn evaluate(
    ranker: &dyn Ranker,
    test_examples: &[TrainingExample],
    ks: &[usize],
) -> Result<EvalReport> {
    if test_examples.is_empty() {
        return Err(FgnnError::Usage("evaluation needs test examples".into()));
    }
    if ks.is_empty() {
        return Err(FgnnError::Usage("evaluation needs at least one K".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty ks");
    let mut rankings = Vec::with_capacity(test_examples.len());
    let mut labels = Vec::with_capacity(test_examples.len());
    for example in test_examples {
        rankings.push(ranker.rank(&example.prefix, max_k)?);
        labels.push(example.label);
    }
    let mut at_k = Vec::with_capacity(ks.len());
    for &k in ks {
        at_k.push(KMetrics {
            k,
            recall: recall_at_k(&rankings, &labels, k)?,
            mrr: mrr_at_k(&rankings, &labels, k)?,
        });
    }
    Ok(EvalReport {
        method: ranker.name().to_string(),
        n_test: test_examples.len(),
        at_k,
    })
}

/// Session-length split used in ablation reporting: prefixes of length
/// ≤ 5 count as short.
pub const SHORT_SESSION_MAX_LEN: usize = 5;

pub struct GroupedReports {
    pub overall: EvalReport,
    pub short: Option<EvalReport>,
    pub long: Option<EvalReport>,
}

/// Evaluate overall plus the short/long prefix breakdown.
pub fn evaluate_grouped(
    ranker: &dyn Ranker,
    test_examples: &[TrainingExample],
    ks: &[usize],
) -> Result<GroupedReports> {
    let overall = evaluate(ranker, test_examples, ks)?;
    let short: Vec<TrainingExample> = test_examples
        .iter()
        .filter(|e| e.prefix.len() <= SHORT_SESSION_MAX_LEN)
        .cloned()
        .collect();
    let long: Vec<TrainingExample> = test_examples
        .iter()
        .filter(|e| e.prefix.len() > SHORT_SESSION_MAX_LEN)
        .cloned()
        .collect();
    let short = if short.is_empty() {
        None
    } else {
        Some(evaluate(ranker, &short, ks)?)
    };
    let long = if long.is_empty() {
        None
    } else {
        Some(evaluate(ranker, &long, ks)?)
    };
    Ok(GroupedReports {
        overall,
        short,
        long,
    })
}

/// Aligned plain-text table over several reports.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut ks: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.at_k.iter().map(|m| m.k))
        .collect();
    ks.sort_unstable();
    ks.dedup();

    let mut header = format!("{:<14}{:>8}", "method", "n_test");
    for k in &ks {
        header.push_str(&format!(
            "{:>10}{:>10}",
            format!("R@{k}"),
            format!("MRR@{k}")
        ));
    }
    let mut out = header;
    out.push('\n');
    for report in reports {
        out.push_str(&format!("{:<14}{:>8}", report.method, report.n_test));
        for k in &ks {
            match report.metrics_at(*k) {
                Some(m) => {
                    out.push_str(&format!("{:>10.4}{:>10.4}", m.recall, m.mrr));
                }
                None => out.push_str(&format!("{:>10}{:>10}", "-", "-")),
            }
        }
        out.push('\n');
    }
    out
}
