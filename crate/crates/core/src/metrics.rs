//! nDCG@k with linear gains, matching trec_eval's `ndcg_cut`.
//!
//! Gain is the judged level and the discount is `log2(rank + 1)`. Unjudged
//! passages have gain 0. Queries with no relevant judgment have an ideal DCG
//! of 0 and are left out of the mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{JudgmentSet, RankedList};
use crate::trec_io::RunMap;

pub const DEFAULT_CUTOFF: usize = 10;

fn dcg(gains: impl Iterator<Item = u32>, k: usize) -> f64 {
    gains
        .take(k)
        .enumerate()
        .map(|(i, g)| f64::from(g) / ((i + 2) as f64).log2())
        .sum()
}

pub fn ndcg_at_k(ranked: &RankedList, judgments: &JudgmentSet, k: usize) -> f64 {
    assert!(k >= 1, "cutoff must be at least 1");
    let Some(judged) = judgments.for_query(ranked.query_id()) else {
        return 0.0;
    };
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter(), k);
    if idcg == 0.0 {
        return 0.0;
    }
    let gains = ranked
        .passage_ids()
        .map(|p| judged.get(p).copied().unwrap_or(0));
    dcg(gains, k) / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub k: usize,
    pub gain_mode: GainMode,
    /// Queries with at least one relevant judgment.
    pub per_query: BTreeMap<String, f64>,
    /// Mean over `per_query`; absent when no query was evaluated.
    pub mean: Option<f64>,
    /// Queries left out of the mean, with the reason.
    pub excluded: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        compare_table(&[("run", self)])
    }
}

pub fn mean_ndcg(runs: &RunMap, judgments: &JudgmentSet, k: usize) -> MetricReport {
    let mut per_query = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for (qid, list) in runs {
        if !judgments.contains_query(qid) {
            log::warn!("query {qid} has no judgments; excluded from nDCG@{k}");
            excluded.insert(qid.clone(), "no judgments".to_string());
            continue;
        }
        let relevant = judgments
            .for_query(qid)
            .is_some_and(|m| m.values().any(|&l| l > 0));
        if !relevant {
            excluded.insert(qid.clone(), "no relevant judgments".to_string());
            continue;
        }
        per_query.insert(qid.clone(), ndcg_at_k(list, judgments, k));
    }
    let mean =
        (!per_query.is_empty()).then(|| per_query.values().sum::<f64>() / per_query.len() as f64);
    MetricReport {
        metric: format!("ndcg_cut_{k}"),
        k,
        gain_mode: GainMode::Linear,
        per_query,
        mean,
        excluded,
    }
}

/// Aligned per-query table with one column per named report, then the mean.
pub fn compare_table(reports: &[(&str, &MetricReport)]) -> String {
    let mut queries: Vec<&String> = reports
        .iter()
        .flat_map(|(_, r)| r.per_query.keys())
        .collect();
    queries.sort();
    queries.dedup();

    let metric = reports.first().map_or("ndcg", |(_, r)| r.metric.as_str());
    let qwidth = queries
        .iter()
        .map(|q| q.len())
        .max()
        .unwrap_or(0)
        .max(metric.len())
        .max(4);
    let widths: Vec<usize> = reports.iter().map(|(name, _)| name.len().max(8)).collect();

    let mut out = String::new();
    let _ = write!(out, "{:<qwidth$}", metric);
    for ((name, _), w) in reports.iter().zip(&widths) {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    let cell = |v: Option<f64>, w: usize| match v {
        Some(v) => format!("  {v:>w$.4}"),
        None => format!("  {:>w$}", "-"),
    };
    for q in &queries {
        let _ = write!(out, "{q:<qwidth$}");
        for ((_, r), &w) in reports.iter().zip(&widths) {
            out.push_str(&cell(r.per_query.get(*q).copied(), w));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<qwidth$}", "mean");
    for ((_, r), &w) in reports.iter().zip(&widths) {
        out.push_str(&cell(r.mean, w));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Judgment;

    fn judgments(rows: &[(&str, &str, u32)]) -> JudgmentSet {
        rows.iter()
            .map(|&(q, p, l)| Judgment {
                query_id: q.into(),
                passage_id: p.into(),
                level: l,
            })
            .collect::<crate::Result<JudgmentSet>>()
            .unwrap()
    }

    fn list(q: &str, ids: &[&str]) -> RankedList {
        RankedList::from_order(q, ids.iter().map(|s| s.to_string())).unwrap()
    }

    #[test]
    fn ideal_order_is_one() {
        let j = judgments(&[("q", "a", 3), ("q", "b", 2), ("q", "c", 0)]);
        assert_eq!(ndcg_at_k(&list("q", &["a", "b", "c", "x"]), &j, 10), 1.0);
    }

    #[test]
    fn single_relevant_at_rank_two() {
        let j = judgments(&[("q", "a", 1)]);
        let v = ndcg_at_k(&list("q", &["x", "a"]), &j, 10);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn zero_idcg_excluded_from_mean() {
        let j = judgments(&[("q1", "a", 2), ("q2", "b", 0)]);
        let mut runs = RunMap::new();
        runs.insert("q1".into(), list("q1", &["a"]));
        runs.insert("q2".into(), list("q2", &["b"]));
        runs.insert("q3".into(), list("q3", &["c"]));
        let r = mean_ndcg(&runs, &j, 10);
        assert_eq!(r.per_query.len(), 1);
        assert_eq!(r.mean, Some(1.0));
        assert_eq!(r.excluded.len(), 2);
        assert_eq!(ndcg_at_k(&list("q2", &["b"]), &j, 10), 0.0);
    }

    #[test]
    fn mean_of_two() {
        let j = judgments(&[("q1", "a", 1), ("q2", "a", 1), ("q2", "b", 1)]);
        let mut runs = RunMap::new();
        runs.insert("q1".into(), list("q1", &["a"]));
        // q2: relevant at 1 and 3 of ideal 1,2
        runs.insert("q2".into(), list("q2", &["a", "x", "b"]));
        let r = mean_ndcg(&runs, &j, 10);
        let q2 = (1.0 + 0.5) / (1.0 + 1.0 / 3f64.log2());
        assert!((r.per_query["q2"] - q2).abs() < 1e-12);
        assert!((r.mean.unwrap() - (1.0 + q2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_runs_have_no_mean() {
        let r = mean_ndcg(&RunMap::new(), &JudgmentSet::new(), 10);
        assert!(r.per_query.is_empty());
        assert_eq!(r.mean, None);
        assert!(r.to_json().contains("\"mean\": null"));
    }

    #[test]
    fn table_lines_up() {
        let j = judgments(&[("q1", "a", 1)]);
        let mut runs = RunMap::new();
        runs.insert("q1".into(), list("q1", &["x", "a"]));
        let r = mean_ndcg(&runs, &j, 10);
        let t = compare_table(&[("bm25", &r), ("reranked", &r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("q1"));
        assert!(lines[1].contains("0.6309"));
        assert!(lines[2].starts_with("mean"));
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }
}
