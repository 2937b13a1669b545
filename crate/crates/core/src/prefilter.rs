//! Splits a scored candidate list at the relevance threshold.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::calibration::{s_pre, Threshold};
use crate::error::{Error, Result};
use crate::model::{RankedList, RelevanceScore};

/// Result of thresholding one query's list. Both halves keep the input's
/// relative order, with ranks renumbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub retained: RankedList,
    pub discarded: RankedList,
    pub threshold_used: Threshold,
}

impl FilterOutcome {
    pub fn summary(&self) -> FilterCounts {
        FilterCounts {
            n: self.retained.len() + self.discarded.len(),
            n_retained: self.retained.len(),
        }
    }
}

/// N and N' for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FilterCounts {
    pub n: usize,
    pub n_retained: usize,
}

/// Keeps passages whose score is at or above `t`.
pub fn apply_filter(
    list: &RankedList,
    scores: &BTreeMap<String, RelevanceScore>,
    t: Threshold,
) -> Result<FilterOutcome> {
    let mut keep = BTreeMap::new();
    for id in list.passage_ids() {
        let s = scores
            .get(id)
            .ok_or_else(|| Error::MissingScore(id.to_string()))?;
        keep.insert(id, s_pre(s.value, t) == 1);
    }
    Ok(FilterOutcome {
        retained: list.retain_order(|e| keep[e.passage_id.as_str()]),
        discarded: list.retain_order(|e| !keep[e.passage_id.as_str()]),
        threshold_used: t,
    })
}
