use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use prefilter_core::calibration::{self, CalibrationReport, SearchMode, Threshold};
use prefilter_core::gateway::{BackendKind, Gateway};
use prefilter_core::model::RelevancePolicy;
use prefilter_core::pipeline::{self, DiscardMode, Inputs, PipelineConfig, ThresholdConfig};
use prefilter_core::trec_io;

#[derive(Debug, Parser)]
#[command(
    name = "prefilter",
    version,
    about = "LLM relevance pre-filtering before listwise re-ranking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every candidate passage with the LLM.
    Score(Common),
    /// Pick a threshold from a sample of judged pairs.
    Calibrate(Common),
    /// Drop passages scored under the threshold.
    Filter(Common),
    /// Sliding-window re-ranking of the filtered lists.
    Rerank(Common),
    /// All stages in order, plus a summary.
    Run(Common),
    /// nDCG of one or more run files side by side.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Http,
    MockOracle,
    MockScripted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Discard {
    Append,
    Drop,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// First-stage run file.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Fixed threshold in [0, 1].
    #[arg(long, conflicts_with = "calibrate")]
    threshold: Option<f64>,
    /// Calibrate the threshold from a qrels sample.
    #[arg(long)]
    calibrate: bool,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_relevant_level: Option<u32>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long, value_enum)]
    discard_mode: Option<Discard>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long)]
    endpoint_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    qrels: PathBuf,
    /// Run files; repeat for a side-by-side comparison.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn load_config(args: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    let p = &mut cfg.paths;
    if let Some(v) = &args.corpus {
        p.corpus = v.clone();
    }
    if let Some(v) = &args.queries {
        p.queries = v.clone();
    }
    if let Some(v) = &args.run {
        p.run = v.clone();
    }
    if let Some(v) = &args.qrels {
        p.qrels = Some(v.clone());
    }
    if let Some(v) = &args.output_dir {
        p.output_dir = v.clone();
    }
    if let Some(v) = args.threshold {
        cfg.threshold = ThresholdConfig::Fixed { value: v };
    }
    if args.calibrate && !matches!(cfg.threshold, ThresholdConfig::Calibrate { .. }) {
        cfg.threshold = ThresholdConfig::Calibrate {
            fraction: calibration::DEFAULT_SAMPLE_FRACTION,
            seed: 0,
            search: SearchMode::default(),
        };
    }
    if let ThresholdConfig::Calibrate { fraction, seed, .. } = &mut cfg.threshold {
        if let Some(v) = args.sample_fraction {
            *fraction = v;
        }
        if let Some(v) = args.seed {
            *seed = v;
        }
    }
    if let Some(v) = args.min_relevant_level {
        cfg.min_relevant_level = RelevancePolicy::new(v)?;
    }
    if let Some(v) = args.top_n {
        cfg.top_n = v;
    }
    if let Some(v) = args.discard_mode {
        cfg.discard_mode = match v {
            Discard::Append => DiscardMode::Append,
            Discard::Drop => DiscardMode::Drop,
        };
    }
    if let Some(v) = args.backend {
        cfg.backend.kind = match v {
            Backend::Http => BackendKind::HttpChat,
            Backend::MockOracle => BackendKind::MockOracle,
            Backend::MockScripted => BackendKind::MockScripted,
        };
    }
    if let Some(v) = &args.endpoint_url {
        cfg.backend.endpoint_url = Some(v.clone());
    }
    if let Some(v) = &args.model {
        cfg.backend.model_name = v.clone();
    }
    if let Some(v) = &args.cache_dir {
        cfg.backend.cache_dir = Some(v.clone());
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn upstream(cfg: &PipelineConfig, file: &str, stage: &str) -> Result<PathBuf> {
    let path = cfg.output_path(file);
    if !path.is_file() {
        bail!("missing {} (run `prefilter {stage}` first)", path.display());
    }
    Ok(path)
}

fn gateway(cfg: &PipelineConfig) -> Result<Gateway> {
    let qrels = match (&cfg.backend.kind, &cfg.paths.qrels) {
        (BackendKind::MockOracle, Some(path)) if cfg.backend.oracle_qrels.is_none() => {
            Some(trec_io::read_qrels(path)?)
        }
        _ => None,
    };
    Ok(Gateway::from_config(&cfg.backend, qrels.as_ref())?)
}

fn with_pool<T: Send>(cfg: &PipelineConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()?;
    pool.install(f)
}

fn score(cfg: &PipelineConfig) -> Result<()> {
    let corpus = trec_io::read_corpus(&cfg.paths.corpus)?;
    let queries = trec_io::read_queries(&cfg.paths.queries)?;
    let run = pipeline::read_run_top_n(&cfg.paths.run, cfg.top_n)?;
    let gw = gateway(cfg)?;
    let out = with_pool(cfg, || {
        Ok(pipeline::score_stage(
            &queries,
            &run,
            &corpus,
            &cfg.scoring,
            cfg.retry_budget,
            &gw,
        )?)
    })?;
    let path = cfg.output_path(pipeline::SCORES_FILE);
    trec_io::write_scores(&out.scores, &path)?;
    let stats = gw.stats();
    eprintln!(
        "scored {} queries with {} LLM calls ({} cache hits, {} backend calls, {} fallbacks) -> {}",
        out.scores.len(),
        out.calls.values().sum::<usize>(),
        stats.cache_hits,
        stats.backend_calls,
        out.fallbacks,
        path.display()
    );
    Ok(())
}

fn calibrate(cfg: &PipelineConfig) -> Result<CalibrationReport> {
    let scores = trec_io::read_scores(upstream(cfg, pipeline::SCORES_FILE, "score")?)?;
    let Some(qrels_path) = &cfg.paths.qrels else {
        bail!("calibration needs --qrels");
    };
    let qrels = trec_io::read_qrels(qrels_path)?;
    let (fraction, seed, search) = match cfg.threshold {
        ThresholdConfig::Calibrate {
            fraction,
            seed,
            search,
        } => (fraction, seed, search),
        _ => (
            calibration::DEFAULT_SAMPLE_FRACTION,
            0,
            SearchMode::default(),
        ),
    };
    let report = calibration::calibrate(
        &scores,
        &qrels,
        cfg.min_relevant_level,
        fraction,
        seed,
        search,
    )?;
    let path = cfg.output_path(pipeline::CALIBRATION_FILE);
    pipeline::write_text(&path, &report.to_json())?;
    eprintln!(
        "selected t = {} (F1 {:.4}) on {} pairs -> {}",
        report.selected,
        report.selected_f1,
        report.evaluated_pairs,
        path.display()
    );
    Ok(report)
}

fn threshold(cfg: &PipelineConfig) -> Result<Threshold> {
    if let Some(v) = cfg.threshold.fixed_value() {
        return Ok(Threshold::new(v)?);
    }
    let path = upstream(cfg, pipeline::CALIBRATION_FILE, "calibrate")?;
    let text = std::fs::read_to_string(&path)?;
    let report: CalibrationReport =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(report.selected_threshold())
}

fn filter(cfg: &PipelineConfig) -> Result<()> {
    let run = pipeline::read_run_top_n(&cfg.paths.run, cfg.top_n)?;
    let scores = trec_io::read_scores(upstream(cfg, pipeline::SCORES_FILE, "score")?)?;
    let t = threshold(cfg)?;
    let out = pipeline::filter_stage(&run, &scores, t, cfg.fallback)?;
    let path = cfg.output_path(pipeline::FILTERED_FILE);
    trec_io::write_run(&out.filtered, &cfg.run_tag, &path)?;
    let n: usize = out.counts.values().map(|c| c.n).sum();
    let kept: usize = out.counts.values().map(|c| c.n_retained).sum();
    eprintln!(
        "t = {}: kept {kept} of {n} passages -> {}",
        t.value(),
        path.display()
    );
    Ok(())
}

fn rerank(cfg: &PipelineConfig) -> Result<()> {
    let corpus = trec_io::read_corpus(&cfg.paths.corpus)?;
    let queries = trec_io::read_queries(&cfg.paths.queries)?;
    let run = pipeline::read_run_top_n(&cfg.paths.run, cfg.top_n)?;
    let filtered = trec_io::read_run(upstream(cfg, pipeline::FILTERED_FILE, "filter")?)?;
    let gw = gateway(cfg)?;
    let out = with_pool(cfg, || {
        Ok(pipeline::rerank_stage(
            &queries,
            &run,
            &filtered,
            &corpus,
            &cfg.window,
            cfg.discard_mode,
            &gw,
        )?)
    })?;
    let path = cfg.output_path(pipeline::RERANKED_FILE);
    trec_io::write_run(&out.run, &cfg.run_tag, &path)?;
    eprintln!(
        "re-ranked {} queries with {} LLM calls -> {}",
        out.run.len(),
        out.calls.values().sum::<usize>(),
        path.display()
    );
    Ok(())
}

fn run_all(cfg: &PipelineConfig) -> Result<()> {
    let inputs = Inputs::load(&cfg.paths, cfg.top_n)?;
    let gw = Gateway::from_config(&cfg.backend, inputs.qrels.as_ref())?;
    let summary = pipeline::run_pipeline_with(cfg, &inputs, &gw)?;
    eprintln!(
        "t = {} ({}), LLM calls: {} scoring + {} rerank",
        summary.threshold,
        summary.threshold_source,
        summary.llm_calls.scoring,
        summary.llm_calls.rerank
    );
    if let (Some(a), Some(b)) = (summary.ndcg_first_stage, summary.ndcg_reranked) {
        println!(
            "ndcg@{}: first stage {a:.4}, re-ranked {b:.4}",
            cfg.ndcg_cutoff
        );
    }
    for q in &summary.filter_quality {
        println!(
            "filter at grade >= {}: precision {:.4}, recall {:.4}, F1 {:.4}",
            q.min_relevant_level, q.precision, q.recall, q.f1
        );
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    if args.k == 0 {
        bail!("k must be at least 1");
    }
    let qrels = trec_io::read_qrels(&args.qrels)?;
    let runs = args
        .runs
        .iter()
        .map(|p| Ok((run_name(p), trec_io::read_run(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(&str, &trec_io::RunMap)> = runs.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let report = pipeline::eval_stage(&named, &qrels, args.k);
    print!("{}", report.to_table());
    if let Some(path) = &args.json {
        pipeline::write_text(path, &report.to_json())?;
    }
    Ok(())
}

fn run_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Exit status for a failure in `stage`.
fn exit_code(stage: &str) -> u8 {
    match stage {
        "score" => 3,
        "calibrate" => 4,
        "filter" => 5,
        "rerank" => 6,
        "eval" => 7,
        _ => 2,
    }
}

/// Runs the command and names the stage that failed.
fn dispatch(cli: Cli) -> std::result::Result<(), (&'static str, anyhow::Error)> {
    let config = |c: &Common| load_config(c).map_err(|e| ("config", e));
    match cli.command {
        Command::Eval(args) => eval(&args).map_err(|e| ("eval", e)),
        Command::Score(c) => score(&config(&c)?).map_err(|e| ("score", e)),
        Command::Calibrate(c) => calibrate(&config(&c)?)
            .map(drop)
            .map_err(|e| ("calibrate", e)),
        Command::Filter(c) => filter(&config(&c)?).map_err(|e| ("filter", e)),
        Command::Rerank(c) => rerank(&config(&c)?).map_err(|e| ("rerank", e)),
        Command::Run(c) => run_all(&config(&c)?).map_err(|e| {
            let stage = match e.downcast_ref::<prefilter_core::Error>() {
                Some(prefilter_core::Error::Stage { stage, .. }) => *stage,
                _ => "load",
            };
            (stage, e)
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("error in {stage}: {e:#}");
            ExitCode::from(exit_code(stage))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(args: &[&str]) -> Common {
        #[derive(Parser)]
        struct Wrap {
            #[command(flatten)]
            common: Common,
        }
        let argv = std::iter::once("prefilter").chain(args.iter().copied());
        Wrap::parse_from(argv).common
    }

    #[test]
    fn example_config_parses() {
        let text = include_str!("../../../config.example.toml");
        let cfg: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.threshold.fixed_value(), Some(0.3));
        assert_eq!(cfg.backend.kind, BackendKind::HttpChat);
        assert_eq!(cfg.window.window_size, 10);
        assert_eq!(cfg.top_n, 100);
    }

    #[test]
    fn flags_without_config_use_defaults() {
        let cfg = load_config(&common(&[
            "--threshold",
            "0.6",
            "--min-relevant-level",
            "2",
        ]))
        .unwrap();
        assert_eq!(cfg.threshold.fixed_value(), Some(0.6));
        assert_eq!(cfg.min_relevant_level, RelevancePolicy::TREC_DL);
        assert_eq!(cfg.top_n, 100);
    }

    #[test]
    fn calibrate_flag_takes_sampling_overrides() {
        let cfg = load_config(&common(&[
            "--calibrate",
            "--qrels",
            "q.txt",
            "--sample-fraction",
            "0.2",
            "--seed",
            "7",
        ]))
        .unwrap();
        match cfg.threshold {
            ThresholdConfig::Calibrate { fraction, seed, .. } => {
                assert_eq!((fraction, seed), (0.2, 7));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(load_config(&common(&["--threshold", "1.2"])).is_err());
        assert!(load_config(&common(&["--min-relevant-level", "3"])).is_err());
        assert!(load_config(&common(&["--calibrate"])).is_err());
    }
}
