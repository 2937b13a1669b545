//! Staged execution: score, calibrate, filter, rerank, evaluate.
//!
//! Each stage is a function over in-memory values plus a writer for its one
//! artifact, so the CLI can run stages separately and [`run_pipeline`] can
//! chain them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{self, ConfusionCounts, LabeledScores, Prf1, SearchMode, Threshold};
use crate::error::{Error, Result};
use crate::gateway::{BackendConfig, Gateway, GatewayStats};
use crate::metrics::{self, MetricReport};
use crate::model::{JudgmentSet, Passage, Query, RankedList, RelevancePolicy};
use crate::prefilter::{apply_filter, FilterCounts};
use crate::rerank::{sliding_window_rerank, WindowConfig};
use crate::scoring::{resolve_fallbacks, score_ranked_list, FallbackScore, ScoringPromptTemplate};
use crate::trec_io::{self, RunMap, ScoreTable};

pub const DEFAULT_TOP_N: usize = 100;

pub const SCORES_FILE: &str = "scores.jsonl";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const FILTERED_FILE: &str = "filtered.run";
pub const RERANKED_FILE: &str = "reranked.run";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Fixed thresholds tuned for Mixtral-8x7B-Instruct scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPreset {
    /// BEIR tasks, grade 1 counted relevant: 0.3.
    Beir,
    /// TREC-DL, grade 1 counted relevant: 0.6.
    TrecLevel1Relevant,
    /// TREC-DL, grade 1 counted irrelevant: 0.7.
    TrecLevel1Irrelevant,
}

impl ThresholdPreset {
    pub fn value(self) -> f64 {
        match self {
            ThresholdPreset::Beir => 0.3,
            ThresholdPreset::TrecLevel1Relevant => 0.6,
            ThresholdPreset::TrecLevel1Irrelevant => 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdConfig {
    Fixed {
        value: f64,
    },
    Preset {
        name: ThresholdPreset,
    },
    Calibrate {
        #[serde(default = "default_fraction")]
        fraction: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        search: SearchMode,
    },
}

fn default_fraction() -> f64 {
    calibration::DEFAULT_SAMPLE_FRACTION
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig::Preset {
            name: ThresholdPreset::Beir,
        }
    }
}

impl ThresholdConfig {
    /// The threshold when it does not depend on calibration.
    pub fn fixed_value(&self) -> Option<f64> {
        match self {
            ThresholdConfig::Fixed { value } => Some(*value),
            ThresholdConfig::Preset { name } => Some(name.value()),
            ThresholdConfig::Calibrate { .. } => None,
        }
    }
}

/// What happens to passages under the threshold in the final run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiscardMode {
    /// Appended after the re-ranked passages in first-stage order.
    #[default]
    Append,
    /// Left out of the final run.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub run: PathBuf,
    pub qrels: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub min_relevant_level: RelevancePolicy,
    pub top_n: usize,
    pub retry_budget: u32,
    pub fallback: FallbackScore,
    pub discard_mode: DiscardMode,
    pub ndcg_cutoff: usize,
    /// Worker threads for per-query fan-out.
    pub workers: usize,
    pub run_tag: String,
    pub threshold: ThresholdConfig,
    pub backend: BackendConfig,
    pub scoring: ScoringPromptTemplate,
    pub window: WindowConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: PathsConfig::default(),
            min_relevant_level: RelevancePolicy::BEIR,
            top_n: DEFAULT_TOP_N,
            retry_budget: 2,
            fallback: FallbackScore::AtThreshold,
            discard_mode: DiscardMode::Append,
            ndcg_cutoff: metrics::DEFAULT_CUTOFF,
            workers: 4,
            run_tag: "prefilter".into(),
            threshold: ThresholdConfig::default(),
            backend: BackendConfig::default(),
            scoring: ScoringPromptTemplate::default(),
            window: WindowConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::Invalid("top_n must be at least 1".into()));
        }
        if self.ndcg_cutoff == 0 {
            return Err(Error::Invalid("ndcg_cutoff must be at least 1".into()));
        }
        if let Some(v) = self.threshold.fixed_value() {
            Threshold::new(v)?;
        }
        if let ThresholdConfig::Calibrate { .. } = self.threshold {
            if self.paths.qrels.is_none() {
                return Err(Error::Invalid("calibration needs paths.qrels".into()));
            }
        }
        self.scoring.validate()?;
        self.window.validate()
    }

    pub fn output_path(&self, file: &str) -> PathBuf {
        self.paths.output_dir.join(file)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// Input files loaded and the run cut to `top_n`.
pub struct Inputs {
    pub corpus: BTreeMap<String, Passage>,
    pub queries: BTreeMap<String, Query>,
    pub run: RunMap,
    pub qrels: Option<JudgmentSet>,
}

impl Inputs {
    pub fn load(paths: &PathsConfig, top_n: usize) -> Result<Self> {
        Ok(Inputs {
            corpus: trec_io::read_corpus(&paths.corpus)?,
            queries: trec_io::read_queries(&paths.queries)?,
            run: read_run_top_n(&paths.run, top_n)?,
            qrels: paths.qrels.as_ref().map(trec_io::read_qrels).transpose()?,
        })
    }
}

pub fn read_run_top_n(path: &Path, top_n: usize) -> Result<RunMap> {
    Ok(trec_io::read_run(path)?
        .into_iter()
        .map(|(q, l)| {
            let cut = l.truncated(top_n);
            (q, cut)
        })
        .collect())
}

fn query_for<'a>(queries: &'a BTreeMap<String, Query>, qid: &str) -> Result<&'a Query> {
    queries
        .get(qid)
        .ok_or_else(|| Error::MissingQuery(qid.to_string()))
}

#[derive(Debug, Clone, Default)]
pub struct ScoreStage {
    pub scores: ScoreTable,
    pub calls: BTreeMap<String, usize>,
    pub fallbacks: usize,
}

pub fn score_stage(
    queries: &BTreeMap<String, Query>,
    run: &RunMap,
    corpus: &BTreeMap<String, Passage>,
    template: &ScoringPromptTemplate,
    retry_budget: u32,
    gateway: &Gateway,
) -> Result<ScoreStage> {
    let per_query: Vec<(String, crate::scoring::QueryScores)> = run
        .par_iter()
        .map(|(qid, list)| {
            let q = query_for(queries, qid)?;
            score_ranked_list(q, list, corpus, template, gateway, retry_budget)
                .map(|s| (qid.clone(), s))
        })
        .collect::<Result<_>>()?;
    let mut out = ScoreStage::default();
    for (qid, s) in per_query {
        out.calls.insert(qid.clone(), s.llm_calls);
        out.fallbacks += s.fallbacks;
        out.scores.insert(qid, s.scores);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct FilterStage {
    /// Retained passages; queries with nothing retained are absent.
    pub filtered: RunMap,
    pub counts: BTreeMap<String, FilterCounts>,
    /// Queries with nothing retained, which keep their first-stage list.
    pub passthrough: Vec<String>,
}

pub fn filter_stage(
    run: &RunMap,
    scores: &ScoreTable,
    t: Threshold,
    fallback: FallbackScore,
) -> Result<FilterStage> {
    let empty = BTreeMap::new();
    let mut out = FilterStage::default();
    for (qid, list) in run {
        let resolved = resolve_fallbacks(scores.get(qid).unwrap_or(&empty), t.value(), fallback);
        let outcome = apply_filter(list, &resolved, t)?;
        out.counts.insert(qid.clone(), outcome.summary());
        if outcome.retained.is_empty() && !list.is_empty() {
            log::warn!(
                "query {qid}: no passage reaches threshold {}; keeping first-stage list (check calibration)",
                t.value()
            );
            out.passthrough.push(qid.clone());
        } else {
            out.filtered.insert(qid.clone(), outcome.retained);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RerankStage {
    pub run: RunMap,
    pub calls: BTreeMap<String, usize>,
}

/// Re-ranks each query's filtered list and assembles the final run.
///
/// Queries absent from `filtered` keep their `original` list unchanged. In
/// append mode the passages missing from the filtered list follow the
/// re-ranked ones in first-stage order.
pub fn rerank_stage(
    queries: &BTreeMap<String, Query>,
    original: &RunMap,
    filtered: &RunMap,
    corpus: &BTreeMap<String, Passage>,
    window: &WindowConfig,
    discard_mode: DiscardMode,
    gateway: &Gateway,
) -> Result<RerankStage> {
    let results: Vec<(String, RankedList, usize)> = original
        .par_iter()
        .map(|(qid, first_stage)| {
            let Some(kept) = filtered.get(qid) else {
                return Ok((qid.clone(), first_stage.clone(), 0));
            };
            let q = query_for(queries, qid)?;
            let reranked = sliding_window_rerank(q, kept, corpus, window, gateway)?;
            let mut order: Vec<String> = reranked.list.passage_ids().map(String::from).collect();
            if discard_mode == DiscardMode::Append {
                let kept_ids: std::collections::HashSet<&str> = kept.passage_ids().collect();
                order.extend(
                    first_stage
                        .passage_ids()
                        .filter(|p| !kept_ids.contains(p))
                        .map(String::from),
                );
            }
            Ok((
                qid.clone(),
                RankedList::from_order(qid.as_str(), order)?,
                reranked.llm_calls,
            ))
        })
        .collect::<Result<_>>()?;
    let mut out = RerankStage::default();
    for (qid, list, calls) in results {
        out.calls.insert(qid.clone(), calls);
        out.run.insert(qid, list);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<NamedReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let named: Vec<(&str, &MetricReport)> = self
            .runs
            .iter()
            .map(|r| (r.name.as_str(), &r.report))
            .collect();
        metrics::compare_table(&named)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.runs.iter().find(|r| r.name == name)?.report.mean
    }
}

pub fn eval_stage(runs: &[(&str, &RunMap)], qrels: &JudgmentSet, k: usize) -> EvalReport {
    EvalReport {
        runs: runs
            .iter()
            .map(|(name, run)| NamedReport {
                name: name.to_string(),
                report: metrics::mean_ndcg(run, qrels, k),
            })
            .collect(),
    }
}

/// P/R/F1 of the applied threshold on all judged, scored pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterQuality {
    pub min_relevant_level: u32,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn filter_quality(
    scores: &ScoreTable,
    qrels: &JudgmentSet,
    policy: RelevancePolicy,
    t: Threshold,
) -> FilterQuality {
    let counts = LabeledScores::new(scores, qrels, policy).confusion(t);
    let Prf1 {
        precision,
        recall,
        f1,
    } = calibration::prf1(counts);
    FilterQuality {
        min_relevant_level: policy.min_relevant_level(),
        counts,
        precision,
        recall,
        f1,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageArtifact {
    pub stage: String,
    /// File name inside the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub n: usize,
    pub n_retained: usize,
    pub passthrough: bool,
    pub scoring_calls: usize,
    pub rerank_calls: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCalls {
    pub scoring: usize,
    pub rerank: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub threshold: f64,
    pub threshold_source: String,
    pub min_relevant_level: u32,
    pub discard_mode: DiscardMode,
    pub queries: BTreeMap<String, QuerySummary>,
    pub llm_calls: StageCalls,
    pub scoring_fallbacks: usize,
    /// Gateway counters; cache hits differ between cold and warm runs.
    pub gateway: GatewayStats,
    /// Filtering quality under the configured policy, and for grade-2
    /// policies also with grade 1 counted relevant.
    pub filter_quality: Vec<FilterQuality>,
    pub ndcg_first_stage: Option<f64>,
    pub ndcg_reranked: Option<f64>,
    pub artifacts: Vec<StageArtifact>,
}

impl PipelineSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn artifact(stage: &str, cfg: &PipelineConfig, file: &str) -> Result<StageArtifact> {
    Ok(StageArtifact {
        stage: stage.to_string(),
        path: file.to_string(),
        sha256: sha256_file(&cfg.output_path(file))?,
    })
}

/// Runs every stage with the backend described by the config.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    let inputs = stage("load", Inputs::load(&cfg.paths, cfg.top_n))?;
    let gateway = stage(
        "load",
        Gateway::from_config(&cfg.backend, inputs.qrels.as_ref()),
    )?;
    run_pipeline_with(cfg, &inputs, &gateway)
}

/// Runs every stage against already loaded inputs and a given gateway.
pub fn run_pipeline_with(
    cfg: &PipelineConfig,
    inputs: &Inputs,
    gateway: &Gateway,
) -> Result<PipelineSummary> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| run_stages(cfg, inputs, gateway))
}

fn run_stages(cfg: &PipelineConfig, inputs: &Inputs, gateway: &Gateway) -> Result<PipelineSummary> {
    let policy = cfg.min_relevant_level;
    let mut artifacts = Vec::new();

    let scored = stage(
        "score",
        score_stage(
            &inputs.queries,
            &inputs.run,
            &inputs.corpus,
            &cfg.scoring,
            cfg.retry_budget,
            gateway,
        ),
    )?;
    stage(
        "score",
        trec_io::write_scores(&scored.scores, cfg.output_path(SCORES_FILE)),
    )?;
    artifacts.push(artifact("score", cfg, SCORES_FILE)?);

    let (threshold, source) = match &cfg.threshold {
        ThresholdConfig::Calibrate {
            fraction,
            seed,
            search,
        } => {
            let qrels = inputs
                .qrels
                .as_ref()
                .ok_or_else(|| Error::Invalid("calibration needs qrels".into()))?;
            let report = stage(
                "calibrate",
                calibration::calibrate(&scored.scores, qrels, policy, *fraction, *seed, *search),
            )?;
            stage(
                "calibrate",
                write_text(&cfg.output_path(CALIBRATION_FILE), &report.to_json()),
            )?;
            artifacts.push(artifact("calibrate", cfg, CALIBRATION_FILE)?);
            (report.selected_threshold(), "calibrated")
        }
        other => (
            Threshold::new(other.fixed_value().expect("fixed or preset"))?,
            "fixed",
        ),
    };

    let filtered = stage(
        "filter",
        filter_stage(&inputs.run, &scored.scores, threshold, cfg.fallback),
    )?;
    stage(
        "filter",
        trec_io::write_run(
            &filtered.filtered,
            &cfg.run_tag,
            cfg.output_path(FILTERED_FILE),
        ),
    )?;
    artifacts.push(artifact("filter", cfg, FILTERED_FILE)?);

    let reranked = stage(
        "rerank",
        rerank_stage(
            &inputs.queries,
            &inputs.run,
            &filtered.filtered,
            &inputs.corpus,
            &cfg.window,
            cfg.discard_mode,
            gateway,
        ),
    )?;
    stage(
        "rerank",
        trec_io::write_run(&reranked.run, &cfg.run_tag, cfg.output_path(RERANKED_FILE)),
    )?;
    artifacts.push(artifact("rerank", cfg, RERANKED_FILE)?);

    let mut quality = Vec::new();
    let (mut ndcg_first_stage, mut ndcg_reranked) = (None, None);
    if let Some(qrels) = &inputs.qrels {
        let eval = eval_stage(
            &[("first_stage", &inputs.run), ("reranked", &reranked.run)],
            qrels,
            cfg.ndcg_cutoff,
        );
        stage(
            "eval",
            write_text(&cfg.output_path(METRICS_FILE), &eval.to_json()),
        )?;
        artifacts.push(artifact("eval", cfg, METRICS_FILE)?);
        ndcg_first_stage = eval.mean("first_stage");
        ndcg_reranked = eval.mean("reranked");

        quality.push(filter_quality(&scored.scores, qrels, policy, threshold));
        if policy != RelevancePolicy::BEIR {
            quality.push(filter_quality(
                &scored.scores,
                qrels,
                RelevancePolicy::BEIR,
                threshold,
            ));
        }
    }

    let queries: BTreeMap<String, QuerySummary> = inputs
        .run
        .keys()
        .map(|qid| {
            let counts = filtered.counts[qid];
            (
                qid.clone(),
                QuerySummary {
                    n: counts.n,
                    n_retained: counts.n_retained,
                    passthrough: filtered.passthrough.contains(qid),
                    scoring_calls: scored.calls.get(qid).copied().unwrap_or(0),
                    rerank_calls: reranked.calls.get(qid).copied().unwrap_or(0),
                },
            )
        })
        .collect();
    let scoring: usize = scored.calls.values().sum();
    let rerank: usize = reranked.calls.values().sum();
    let summary = PipelineSummary {
        threshold: threshold.value(),
        threshold_source: source.to_string(),
        min_relevant_level: policy.min_relevant_level(),
        discard_mode: cfg.discard_mode,
        queries,
        llm_calls: StageCalls {
            scoring,
            rerank,
            total: scoring + rerank,
        },
        scoring_fallbacks: scored.fallbacks,
        gateway: gateway.stats(),
        filter_quality: quality,
        ndcg_first_stage,
        ndcg_reranked,
        artifacts,
    };
    write_text(&cfg.output_path(SUMMARY_FILE), &summary.to_json())?;
    Ok(summary)
}
