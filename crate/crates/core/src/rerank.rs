//! Listwise re-ranking with a sliding window.
//!
//! The model sees a window of labeled passages and answers with an ordering
//! such as `[2] > [3] > [1]`. Windows move from the bottom of the list to the
//! top, so strong passages are carried upward through the overlap.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    Gateway, GenerationRequest, PromptContext, PromptTask, DEFAULT_PERMUTATION_MAX_TOKENS,
};
use crate::model::{Passage, Query, RankedList};
use crate::scoring::{labeled_passages, DEFAULT_WORD_BUDGET, TRUNCATION_MARK};

pub const DEFAULT_WINDOW_SIZE: usize = 10;
pub const DEFAULT_STEP_SIZE: usize = 5;

const SYSTEM_PROMPT: &str =
    "You are an intelligent assistant that ranks passages by their relevance to a search query.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_size: usize,
    pub step_size: usize,
    pub passes: usize,
    pub word_budget: usize,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_size: DEFAULT_WINDOW_SIZE,
            step_size: DEFAULT_STEP_SIZE,
            passes: 1,
            word_budget: DEFAULT_WORD_BUDGET,
            max_tokens: DEFAULT_PERMUTATION_MAX_TOKENS,
            temperature: 0.0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.step_size == 0 || self.step_size > self.window_size {
            return Err(Error::Invalid(format!(
                "need 1 <= step_size <= window_size, got step {} window {}",
                self.step_size, self.window_size
            )));
        }
        if self.passes == 0 {
            return Err(Error::Invalid("passes must be at least 1".into()));
        }
        if self.word_budget == 0 {
            return Err(Error::Invalid("word_budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Start offsets of the windows of one pass over `n` items, bottom first.
/// The last window always starts at 0.
pub fn window_offsets(n: usize, window_size: usize, step_size: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut offsets = Vec::new();
    let mut start = n.saturating_sub(window_size);
    loop {
        offsets.push(start);
        if start == 0 {
            break;
        }
        start = start.saturating_sub(step_size);
    }
    offsets
}

/// LLM calls one pass makes: windows of a single passage are skipped.
pub fn calls_per_pass(n: usize, window_size: usize, step_size: usize) -> usize {
    window_offsets(n, window_size, step_size)
        .into_iter()
        .filter(|&o| (n - o).min(window_size) > 1)
        .count()
}

pub fn build_rerank_prompt(
    query: &Query,
    window: &[&Passage],
    cfg: &WindowConfig,
) -> GenerationRequest {
    let n = window.len();
    let q = query.text.trim();
    let mut user = format!(
        "I will provide you with {n} passages, each indicated by a numerical identifier []. \
         Rank the passages based on their relevance to the search query: {q}\n\n"
    );
    user.push_str(&labeled_passages(window, cfg.word_budget));
    user.push_str(&format!(
        "Passages longer than {} words are cut and marked {TRUNCATION_MARK}.\n\n\
         Search query: {q}\n\n\
         Rank the {n} passages above based on their relevance to the search query. \
         List all {n} identifiers in descending order of relevance. \
         The output format should be [] > [], e.g., [2] > [1]. \
         Only respond with the ranking results, do not say any word or explain.",
        cfg.word_budget
    ));
    let mut req = GenerationRequest::new(SYSTEM_PROMPT, user, cfg.max_tokens);
    req.temperature = cfg.temperature;
    req.context = Some(PromptContext {
        task: PromptTask::Permute,
        query_id: query.id.clone(),
        passage_ids: window.iter().map(|p| p.id.clone()).collect(),
    });
    req
}

/// A reordering of window labels `1..=w`, most relevant first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(w: usize) -> Self {
        Permutation((1..=w).collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &l)| l == i + 1)
    }

    /// Reorders `items` so that position i holds the item labeled `order[i]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        debug_assert_eq!(items.len(), self.0.len());
        self.0.iter().map(|&l| items[l - 1].clone()).collect()
    }
}

fn label_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\s*(\d+)\s*\]").expect("valid regex"))
}

/// Reads bracketed labels in order of appearance and repairs the result into
/// a permutation of `1..=w`: out-of-range labels are dropped, repeats keep
/// their first occurrence, and missing labels are appended ascending.
pub fn parse_permutation(response_text: &str, w: usize) -> Permutation {
    let mut seen = vec![false; w + 1];
    let mut order = Vec::with_capacity(w);
    for cap in label_pattern().captures_iter(response_text) {
        let Ok(label) = cap[1].parse::<usize>() else {
            continue;
        };
        if (1..=w).contains(&label) && !seen[label] {
            seen[label] = true;
            order.push(label);
        }
    }
    if order.is_empty() && w > 0 {
        log::warn!("no ranking labels in response; keeping window order");
    }
    order.extend((1..=w).filter(|&l| !seen[l]));
    Permutation(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    /// Re-ranked list with scores `N - rank + 1`.
    pub list: RankedList,
    pub llm_calls: usize,
}

pub fn sliding_window_rerank(
    query: &Query,
    list: &RankedList,
    corpus: &BTreeMap<String, Passage>,
    cfg: &WindowConfig,
    gateway: &Gateway,
) -> Result<RerankOutcome> {
    cfg.validate()?;
    let mut order: Vec<&Passage> = list
        .passage_ids()
        .map(|id| {
            corpus
                .get(id)
                .ok_or_else(|| Error::MissingPassage(id.to_string()))
        })
        .collect::<Result<_>>()?;
    let n = order.len();
    let mut llm_calls = 0;

    for _ in 0..cfg.passes {
        for offset in window_offsets(n, cfg.window_size, cfg.step_size) {
            let end = (offset + cfg.window_size).min(n);
            let window = &order[offset..end];
            if window.len() < 2 {
                continue;
            }
            let resp = gateway.generate(&build_rerank_prompt(query, window, cfg))?;
            llm_calls += 1;
            let perm = parse_permutation(&resp.text, window.len());
            let reordered = perm.apply(window);
            order[offset..end].copy_from_slice(&reordered);
        }
    }

    let list = RankedList::from_order(list.query_id(), order.into_iter().map(|p| p.id.clone()))?;
    Ok(RerankOutcome { list, llm_calls })
}
