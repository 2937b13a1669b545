//! Pointwise relevance scoring of candidate passages in small chunks.
//!
//! Each chunk becomes one zero-shot prompt that asks the model to reason
//! about the query and passages first and then emit one
//! `Passage [i]: <score>` line per passage with a score in [0, 1].

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    Gateway, GenerationRequest, PromptContext, PromptTask, DEFAULT_SCORING_MAX_TOKENS,
};
use crate::model::{clamp_unit, Passage, Query, RankedList, RelevanceScore};

pub const DEFAULT_INSTRUCTION: &str = "Grasp and understand both the query and the passages before score generation. Then, based on your understanding and analysis quantify the relevance between the passage and the query. Give the rationale before answering.";

pub const DEFAULT_OUTPUT_FORMAT: &str = "After the rationale, finish with one line per passage in the form `Passage [i]: <score>`, where <score> is a decimal number between 0 and 1 (0 means completely irrelevant, 1 means fully relevant).";

pub const DEFAULT_SYSTEM_PROMPT: &str = "You are an expert assessor of search result relevance.";

pub const DEFAULT_CHUNK_SIZE: usize = 5;
pub const DEFAULT_WORD_BUDGET: usize = 300;
pub const TRUNCATION_MARK: &str = "(truncated)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringPromptTemplate {
    pub system_prompt: String,
    pub instruction_text: String,
    pub output_format_clause: String,
    pub chunk_size: usize,
    /// Passages longer than this many words are cut.
    pub word_budget: usize,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for ScoringPromptTemplate {
    fn default() -> Self {
        ScoringPromptTemplate {
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            instruction_text: DEFAULT_INSTRUCTION.into(),
            output_format_clause: DEFAULT_OUTPUT_FORMAT.into(),
            chunk_size: DEFAULT_CHUNK_SIZE,
            word_budget: DEFAULT_WORD_BUDGET,
            max_tokens: DEFAULT_SCORING_MAX_TOKENS,
            temperature: 0.0,
        }
    }
}

impl ScoringPromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Invalid("chunk_size must be at least 1".into()));
        }
        if self.instruction_text.trim().is_empty() {
            return Err(Error::Invalid("instruction_text is empty".into()));
        }
        if self.word_budget == 0 {
            return Err(Error::Invalid("word_budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Cuts `text` to its first `budget` whitespace-separated words. Returns the
/// text and whether it was cut.
pub fn truncate_words(text: &str, budget: usize) -> (String, bool) {
    let mut words = text.split_whitespace();
    let head: Vec<&str> = words.by_ref().take(budget).collect();
    if words.next().is_some() {
        (head.join(" "), true)
    } else {
        (text.trim().to_string(), false)
    }
}

/// Formats `[i] text` blocks, marking cut passages.
pub(crate) fn labeled_passages(passages: &[&Passage], budget: usize) -> String {
    let mut out = String::new();
    for (i, p) in passages.iter().enumerate() {
        let (text, cut) = truncate_words(&p.text, budget);
        out.push_str(&format!("[{}] {text}", i + 1));
        if cut {
            out.push(' ');
            out.push_str(TRUNCATION_MARK);
        }
        out.push_str("\n\n");
    }
    out
}

pub fn build_scoring_prompt(
    query: &Query,
    chunk: &[&Passage],
    template: &ScoringPromptTemplate,
) -> GenerationRequest {
    debug_assert!(!chunk.is_empty() && chunk.len() <= template.chunk_size.max(1));
    let mut user = format!("Query: {}\n\n", query.text.trim());
    user.push_str(&format!(
        "Passages ({}; passages longer than {} words are cut and marked {TRUNCATION_MARK}):\n\n",
        chunk.len(),
        template.word_budget
    ));
    user.push_str(&labeled_passages(chunk, template.word_budget));
    user.push_str(template.instruction_text.trim());
    user.push_str("\n\n");
    user.push_str(template.output_format_clause.trim());

    let mut req = GenerationRequest::new(&template.system_prompt, user, template.max_tokens);
    req.temperature = template.temperature;
    req.context = Some(PromptContext {
        task: PromptTask::Score,
        query_id: query.id.clone(),
        passage_ids: chunk.iter().map(|p| p.id.clone()).collect(),
    });
    req
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreParseReport {
    pub parsed: Vec<RelevanceScore>,
    pub unparsed_passage_ids: Vec<String>,
    pub retries_used: u32,
}

fn score_line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)passage\s*\[\s*(\d+)\s*\]\s*\**\s*[:=\-]\s*\**\s*([+-]?(?:\d+(?:\.\d*)?|\.\d+))",
        )
        .expect("valid regex")
    })
}

/// Extracts `Passage [i]: <score>` values for the chunk. The last
/// occurrence of a label wins; out-of-range values are clamped.
pub fn parse_scores(
    query_id: &str,
    response_text: &str,
    chunk_passage_ids: &[String],
) -> ScoreParseReport {
    let mut found: HashMap<usize, f64> = HashMap::new();
    for cap in score_line_pattern().captures_iter(response_text) {
        let Ok(label) = cap[1].parse::<usize>() else {
            continue;
        };
        if label == 0 || label > chunk_passage_ids.len() {
            continue;
        }
        if let Ok(v) = cap[2].parse::<f64>() {
            found.insert(label, v);
        }
    }

    let mut report = ScoreParseReport::default();
    for (i, pid) in chunk_passage_ids.iter().enumerate() {
        match found.get(&(i + 1)) {
            Some(&v) => {
                if !(0.0..=1.0).contains(&v) {
                    log::warn!("score {v} for {query_id}/{pid} outside [0, 1]; clamped");
                }
                let mut score = RelevanceScore::new(query_id, pid.as_str(), clamp_unit(v));
                score.raw_response = Some(response_text.to_string());
                report.parsed.push(score);
            }
            None => report.unparsed_passage_ids.push(pid.clone()),
        }
    }
    report
}

/// Scores for one query's list plus call accounting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryScores {
    pub scores: BTreeMap<String, RelevanceScore>,
    pub llm_calls: usize,
    pub retries_used: u32,
    pub fallbacks: usize,
}

/// Scores every passage of `list` in consecutive chunks.
///
/// Passages missing from a chunk response are re-asked alone, up to
/// `retry_budget` times each. Anything still unparsed is returned with
/// `fallback = true` and a placeholder value of 0.
pub fn score_ranked_list(
    query: &Query,
    list: &RankedList,
    corpus: &BTreeMap<String, Passage>,
    template: &ScoringPromptTemplate,
    gateway: &Gateway,
    retry_budget: u32,
) -> Result<QueryScores> {
    template.validate()?;
    let passages: Vec<&Passage> = list
        .passage_ids()
        .map(|id| {
            corpus
                .get(id)
                .ok_or_else(|| Error::MissingPassage(id.to_string()))
        })
        .collect::<Result<_>>()?;

    let chunk_results: Vec<(ScoreParseReport, usize, u32)> = passages
        .par_chunks(template.chunk_size)
        .map(|chunk| score_chunk(query, chunk, template, gateway, retry_budget))
        .collect::<Result<_>>()?;

    let mut out = QueryScores::default();
    for (report, calls, retries) in chunk_results {
        out.llm_calls += calls;
        out.retries_used += retries;
        for s in report.parsed {
            out.scores.insert(s.passage_id.clone(), s);
        }
        for pid in report.unparsed_passage_ids {
            log::warn!(
                "no score for {}/{pid} after retries; using fallback",
                query.id
            );
            let mut s = RelevanceScore::new(query.id.as_str(), pid.as_str(), 0.0);
            s.fallback = true;
            out.fallbacks += 1;
            out.scores.insert(pid, s);
        }
    }
    Ok(out)
}

fn score_chunk(
    query: &Query,
    chunk: &[&Passage],
    template: &ScoringPromptTemplate,
    gateway: &Gateway,
    retry_budget: u32,
) -> Result<(ScoreParseReport, usize, u32)> {
    let ids: Vec<String> = chunk.iter().map(|p| p.id.clone()).collect();
    let resp = gateway.generate(&build_scoring_prompt(query, chunk, template))?;
    let mut report = parse_scores(&query.id, &resp.text, &ids);
    let mut calls = 1;

    let pending = std::mem::take(&mut report.unparsed_passage_ids);
    for pid in pending {
        let passage = chunk.iter().find(|p| p.id == pid).expect("id from chunk");
        let single = [pid.clone()];
        let mut scored = false;
        for attempt in 1..=retry_budget {
            let mut req = build_scoring_prompt(query, &[*passage], template);
            req.attempt = attempt;
            let resp = gateway.generate(&req)?;
            calls += 1;
            report.retries_used += 1;
            let mut retry = parse_scores(&query.id, &resp.text, &single);
            if let Some(s) = retry.parsed.pop() {
                report.parsed.push(s);
                scored = true;
                break;
            }
        }
        if !scored {
            report.unparsed_passage_ids.push(pid);
        }
    }
    let retries = report.retries_used;
    Ok((report, calls, retries))
}

/// How placeholder scores of unparseable passages are resolved once the
/// threshold is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FallbackScore {
    /// Score at the threshold, so the passage is kept.
    #[default]
    AtThreshold,
    /// Score 0; the passage is dropped by any positive threshold.
    Zero,
}

/// Replaces fallback placeholders according to `mode`.
pub fn resolve_fallbacks(
    scores: &BTreeMap<String, RelevanceScore>,
    threshold: f64,
    mode: FallbackScore,
) -> BTreeMap<String, RelevanceScore> {
    scores
        .iter()
        .map(|(pid, s)| {
            let mut s = s.clone();
            if s.fallback {
                s.value = match mode {
                    FallbackScore::AtThreshold => clamp_unit(threshold),
                    FallbackScore::Zero => 0.0,
                };
            }
            (pid.clone(), s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;

    fn ids(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("d{i}")).collect()
    }

    fn passage(id: &str, text: &str) -> Passage {
        Passage::new(id, text).unwrap()
    }

    #[test]
    fn labels_appear_once_each() {
        let q = Query::new("q", "what is rust").unwrap();
        let ps: Vec<Passage> = (1..=5).map(|i| passage(&format!("d{i}"), "text")).collect();
        let refs: Vec<&Passage> = ps.iter().collect();
        let req = build_scoring_prompt(&q, &refs, &ScoringPromptTemplate::default());
        for i in 1..=5 {
            assert_eq!(
                req.user_prompt.matches(&format!("[{i}] ")).count(),
                1,
                "label {i}"
            );
        }
        assert!(!req.user_prompt.contains("[6]"));
        assert!(req.user_prompt.contains("what is rust"));
        assert!(req.user_prompt.contains(DEFAULT_INSTRUCTION));
        assert!(req.user_prompt.contains(DEFAULT_OUTPUT_FORMAT));
        assert_eq!(req.context.unwrap().passage_ids, ids(5));
    }

    #[test]
    fn single_passage_prompt() {
        let q = Query::new("q", "x").unwrap();
        let p = passage("d1", "body");
        let req = build_scoring_prompt(&q, &[&p], &ScoringPromptTemplate::default());
        assert!(req.user_prompt.contains("[1] body"));
        assert!(!req.user_prompt.contains("[2]"));
    }

    #[test]
    fn long_passages_truncated() {
        let words: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
        let p = passage("d1", &words.join(" "));
        let q = Query::new("q", "x").unwrap();
        let req = build_scoring_prompt(&q, &[&p], &ScoringPromptTemplate::default());
        let expected = format!("[1] {} {TRUNCATION_MARK}", words[..300].join(" "));
        assert!(req.user_prompt.contains(&expected));
        assert!(!req.user_prompt.contains("w300"));

        let (t, cut) = truncate_words("a  b\nc", 3);
        assert_eq!((t.as_str(), cut), ("a  b\nc", false));
        let (t, cut) = truncate_words("a b c d", 3);
        assert_eq!((t.as_str(), cut), ("a b c", true));
    }

    #[test]
    fn parses_plain_lines() {
        let r = parse_scores("q", "Passage [1]: 0.8\nPassage [2]: 0.1", &ids(2));
        let values: Vec<f64> = r.parsed.iter().map(|s| s.value).collect();
        assert_eq!(values, vec![0.8, 0.1]);
        assert!(r.unparsed_passage_ids.is_empty());
    }

    #[test]
    fn clamps_out_of_range() {
        let r = parse_scores("q", "The passage discusses X.\nPassage [1]: 1.3", &ids(1));
        assert_eq!(r.parsed[0].value, 1.0);
        let r = parse_scores("q", "Passage [1]: -0.5", &ids(1));
        assert_eq!(r.parsed[0].value, 0.0);
    }

    #[test]
    fn no_labels_means_all_unparsed() {
        let r = parse_scores("q", "I cannot assess these.", &ids(3));
        assert!(r.parsed.is_empty());
        assert_eq!(r.unparsed_passage_ids, ids(3));
    }

    #[test]
    fn last_occurrence_wins_and_extra_labels_ignored() {
        let text = "Passage [1]: 0.2 seems low at first.\nPassage [1] mentions rust.\n**Passage [2]:** 0.5\nPassage [3]: 0.9\nPassage [1]: .75";
        let r = parse_scores("q", text, &ids(2));
        assert_eq!(r.parsed[0].value, 0.75);
        assert_eq!(r.parsed[1].value, 0.5);
        assert_eq!(r.parsed.len(), 2);
    }

    #[test]
    fn rationale_without_number_not_parsed() {
        let r = parse_scores("q", "Passage [1]: This passage is about cats.", &ids(1));
        assert_eq!(r.unparsed_passage_ids, ids(1));
    }

    fn corpus(n: usize) -> BTreeMap<String, Passage> {
        ids(n)
            .into_iter()
            .map(|id| (id.clone(), passage(&id, &format!("text of {id}"))))
            .collect()
    }

    fn full_score_backend() -> Gateway {
        Gateway::new(Box::new(ScriptedBackend::from_fn(
            "all",
            |req: &GenerationRequest| {
                let n = req.context.as_ref().unwrap().passage_ids.len();
                Ok((1..=n).map(|i| format!("Passage [{i}]: 0.5\n")).collect())
            },
        )))
    }

    #[test]
    fn chunking_call_count() {
        let q = Query::new("q", "x").unwrap();
        let list = RankedList::from_order("q", ids(100)).unwrap();
        let gw = full_score_backend();
        let out = score_ranked_list(
            &q,
            &list,
            &corpus(100),
            &ScoringPromptTemplate::default(),
            &gw,
            2,
        )
        .unwrap();
        assert_eq!(out.llm_calls, 20);
        assert_eq!(gw.stats().requests, 20);
        assert_eq!(out.scores.len(), 100);

        let out = score_ranked_list(
            &q,
            &list.truncated(13),
            &corpus(100),
            &ScoringPromptTemplate::default(),
            &gw,
            2,
        )
        .unwrap();
        assert_eq!(out.llm_calls, 3);
    }

    #[test]
    fn empty_list_no_calls() {
        let q = Query::new("q", "x").unwrap();
        let list = RankedList::from_order("q", Vec::<String>::new()).unwrap();
        let gw = full_score_backend();
        let out = score_ranked_list(
            &q,
            &list,
            &corpus(0),
            &ScoringPromptTemplate::default(),
            &gw,
            2,
        )
        .unwrap();
        assert!(out.scores.is_empty());
        assert_eq!(gw.stats().requests, 0);
    }

    #[test]
    fn missing_passage_named() {
        let q = Query::new("q", "x").unwrap();
        let list = RankedList::from_order("q", vec!["nope".to_string()]).unwrap();
        let err = score_ranked_list(
            &q,
            &list,
            &corpus(1),
            &ScoringPromptTemplate::default(),
            &full_score_backend(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingPassage(id) if id == "nope"));
    }

    #[test]
    fn retries_in_singletons_then_falls_back() {
        // chunk response omits label 2; singleton retries answer only for d2 on attempt 2
        let gw = Gateway::new(Box::new(ScriptedBackend::from_fn(
            "partial",
            |req: &GenerationRequest| {
                let ctx = req.context.as_ref().unwrap();
                if ctx.passage_ids.len() > 1 {
                    return Ok("Passage [1]: 0.9\nPassage [3]: 0.4\n".into());
                }
                match (ctx.passage_ids[0].as_str(), req.attempt) {
                    ("d2", 2) => Ok("Passage [1]: 0.6".into()),
                    _ => Ok("unsure".into()),
                }
            },
        )));
        let q = Query::new("q", "x").unwrap();
        let list = RankedList::from_order("q", ids(3)).unwrap();
        let out = score_ranked_list(
            &q,
            &list,
            &corpus(3),
            &ScoringPromptTemplate::default(),
            &gw,
            2,
        )
        .unwrap();
        assert_eq!(out.scores["d2"].value, 0.6);
        assert_eq!(out.llm_calls, 3);
        assert_eq!(out.fallbacks, 0);

        let out = score_ranked_list(
            &q,
            &list,
            &corpus(3),
            &ScoringPromptTemplate::default(),
            &gw,
            1,
        )
        .unwrap();
        assert!(out.scores["d2"].fallback);
        assert_eq!(out.llm_calls, 2);
        assert_eq!(out.fallbacks, 1);
    }

    #[test]
    fn fallback_resolution() {
        let mut scores = BTreeMap::new();
        let mut f = RelevanceScore::new("q", "a", 0.0);
        f.fallback = true;
        scores.insert("a".to_string(), f);
        scores.insert("b".to_string(), RelevanceScore::new("q", "b", 0.2));
        let kept = resolve_fallbacks(&scores, 0.3, FallbackScore::AtThreshold);
        assert_eq!(kept["a"].value, 0.3);
        assert_eq!(kept["b"].value, 0.2);
        let strict = resolve_fallbacks(&scores, 0.3, FallbackScore::Zero);
        assert_eq!(strict["a"].value, 0.0);
    }
}
