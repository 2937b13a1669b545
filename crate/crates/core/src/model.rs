//! Domain types shared by every pipeline stage.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest relevance grade used by the supported TREC and BEIR collections.
pub const MAX_STANDARD_LEVEL: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let (id, text) = (id.into(), text.into());
        if id.is_empty() {
            return Err(Error::Invalid("query id is empty".into()));
        }
        if text.trim().is_empty() {
            return Err(Error::Invalid(format!("query {id} has empty text")));
        }
        Ok(Query { id, text })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Invalid("passage id is empty".into()));
        }
        Ok(Passage {
            id,
            text: text.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub passage_id: String,
    pub level: u32,
}

/// How a dataset's graded judgments collapse to relevant / not relevant.
///
/// BEIR-style collections count grade 1 as (partially) relevant, TREC-DL
/// collections count it as not relevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct RelevancePolicy {
    min_relevant_level: u32,
}

impl RelevancePolicy {
    /// Grade 1 and above are relevant.
    pub const BEIR: RelevancePolicy = RelevancePolicy {
        min_relevant_level: 1,
    };
    /// Grade 2 and above are relevant.
    pub const TREC_DL: RelevancePolicy = RelevancePolicy {
        min_relevant_level: 2,
    };

    pub fn new(min_relevant_level: u32) -> Result<Self> {
        match min_relevant_level {
            1 | 2 => Ok(RelevancePolicy { min_relevant_level }),
            other => Err(Error::Invalid(format!(
                "min_relevant_level must be 1 or 2, got {other}"
            ))),
        }
    }

    pub fn min_relevant_level(self) -> u32 {
        self.min_relevant_level
    }

    pub fn is_relevant(self, level: u32) -> bool {
        level >= self.min_relevant_level
    }

    /// The 0/1 label of a graded judgment under this policy.
    pub fn binarize(self, level: u32) -> u8 {
        u8::from(self.is_relevant(level))
    }
}

impl Default for RelevancePolicy {
    fn default() -> Self {
        RelevancePolicy::BEIR
    }
}

impl TryFrom<u32> for RelevancePolicy {
    type Error = Error;

    fn try_from(level: u32) -> Result<Self> {
        RelevancePolicy::new(level)
    }
}

impl From<RelevancePolicy> for u32 {
    fn from(p: RelevancePolicy) -> u32 {
        p.min_relevant_level
    }
}

/// Graded judgments (qrels), keyed by query then passage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JudgmentSet {
    by_query: BTreeMap<String, BTreeMap<String, u32>>,
    len: usize,
}

impl JudgmentSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a judgment. Re-adding an identical judgment is a no-op; a
    /// different level for the same pair is an error.
    pub fn insert(&mut self, judgment: Judgment) -> Result<()> {
        let Judgment {
            query_id,
            passage_id,
            level,
        } = judgment;
        if level > MAX_STANDARD_LEVEL {
            log::warn!(
                "judgment {query_id}/{passage_id} has grade {level} above {MAX_STANDARD_LEVEL}; treated as relevant"
            );
        }
        let docs = self.by_query.entry(query_id.clone()).or_default();
        match docs.get(&passage_id) {
            Some(&existing) if existing == level => Ok(()),
            Some(&existing) => Err(Error::ConflictingJudgment {
                query_id,
                passage_id,
                first: existing,
                second: level,
            }),
            None => {
                docs.insert(passage_id, level);
                self.len += 1;
                Ok(())
            }
        }
    }

    pub fn level(&self, query_id: &str, passage_id: &str) -> Option<u32> {
        self.by_query.get(query_id)?.get(passage_id).copied()
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.by_query.get(query_id)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.by_query.contains_key(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }

    /// All judgments in (query_id, passage_id) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.by_query.iter().flat_map(|(q, docs)| {
            docs.iter()
                .map(move |(p, &level)| (q.as_str(), p.as_str(), level))
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_level(&self) -> u32 {
        self.iter().map(|(_, _, l)| l).max().unwrap_or(0)
    }
}

impl FromIterator<Judgment> for Result<JudgmentSet> {
    fn from_iter<I: IntoIterator<Item = Judgment>>(iter: I) -> Self {
        let mut set = JudgmentSet::new();
        for j in iter {
            set.insert(j)?;
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub passage_id: String,
    pub score: f64,
    pub rank: usize,
}

/// An ordered candidate list for one query. Ranks are always 1..=N.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    query_id: String,
    entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Builds a list from `(passage_id, score)` pairs already in rank order.
    ///
    /// Fails on empty or duplicate ids, non-finite scores, or a score that
    /// rises with rank.
    pub fn new(query_id: impl Into<String>, ranked: Vec<(String, f64)>) -> Result<Self> {
        let query_id = query_id.into();
        let mut seen = HashSet::with_capacity(ranked.len());
        let mut prev = f64::INFINITY;
        let mut entries = Vec::with_capacity(ranked.len());
        for (i, (passage_id, score)) in ranked.into_iter().enumerate() {
            if passage_id.is_empty() {
                return Err(Error::Invalid(format!(
                    "empty passage id in list for query {query_id}"
                )));
            }
            if !score.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite score for {query_id}/{passage_id}"
                )));
            }
            if score > prev {
                return Err(Error::Invalid(format!(
                    "score increases at rank {} for query {query_id}",
                    i + 1
                )));
            }
            if !seen.insert(passage_id.clone()) {
                return Err(Error::Duplicate {
                    query_id,
                    passage_id,
                });
            }
            prev = score;
            entries.push(RankedEntry {
                passage_id,
                score,
                rank: i + 1,
            });
        }
        Ok(RankedList { query_id, entries })
    }

    /// Builds a list from an ordering alone; scores are `N - rank + 1`.
    pub fn from_order(
        query_id: impl Into<String>,
        ids: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let ids: Vec<String> = ids.into_iter().collect();
        let n = ids.len();
        let ranked = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, (n - i) as f64))
            .collect();
        RankedList::new(query_id, ranked)
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn passage_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.passage_id.as_str())
    }

    /// The first `n` entries, keeping original scores.
    pub fn truncated(&self, n: usize) -> RankedList {
        RankedList {
            query_id: self.query_id.clone(),
            entries: self.entries.iter().take(n).cloned().collect(),
        }
    }

    /// Sub-list of the entries matching `keep`, in original order with ranks
    /// renumbered and original scores kept.
    pub fn retain_order(&self, mut keep: impl FnMut(&RankedEntry) -> bool) -> RankedList {
        let entries = self
            .entries
            .iter()
            .filter(|e| keep(e))
            .enumerate()
            .map(|(i, e)| RankedEntry {
                passage_id: e.passage_id.clone(),
                score: e.score,
                rank: i + 1,
            })
            .collect();
        RankedList {
            query_id: self.query_id.clone(),
            entries,
        }
    }
}

/// An LLM-assigned relevance score for one (query, passage) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub query_id: String,
    pub passage_id: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    /// Set when no parseable score was obtained and `value` is a placeholder.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl RelevanceScore {
    /// Builds a score, clamping `value` into [0, 1].
    pub fn new(query_id: impl Into<String>, passage_id: impl Into<String>, value: f64) -> Self {
        RelevanceScore {
            query_id: query_id.into(),
            passage_id: passage_id.into(),
            value: clamp_unit(value),
            raw_response: None,
            fallback: false,
        }
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}
