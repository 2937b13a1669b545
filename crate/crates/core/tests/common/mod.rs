#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prefilter_core::model::{Judgment, JudgmentSet, Passage, Query, RankedList};
use prefilter_core::pipeline::{Inputs, PathsConfig};
use prefilter_core::trec_io::{self, RunMap};

/// Every candidate is judged; `levels` draws one query's grades.
pub fn synthetic(
    n_queries: usize,
    n_passages: usize,
    seed: u64,
    mut levels: impl FnMut(&mut ChaCha8Rng) -> Vec<u32>,
) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = BTreeMap::new();
    let mut queries = BTreeMap::new();
    let mut run = RunMap::new();
    let mut qrels = JudgmentSet::new();
    for qi in 0..n_queries {
        let qid = format!("q{qi}");
        queries.insert(
            qid.clone(),
            Query::new(&qid, format!("synthetic question number {qi}")).unwrap(),
        );
        let grades = levels(&mut rng);
        assert_eq!(grades.len(), n_passages);
        let mut ids = Vec::new();
        for (pi, &level) in grades.iter().enumerate() {
            let pid = format!("d{qi}_{pi}");
            corpus.insert(
                pid.clone(),
                Passage::new(&pid, format!("text of passage {pi} for query {qi}")).unwrap(),
            );
            qrels
                .insert(Judgment {
                    query_id: qid.clone(),
                    passage_id: pid.clone(),
                    level,
                })
                .unwrap();
            ids.push(pid);
        }
        ids.shuffle(&mut rng);
        let mut score = 30.0;
        let ranked = ids
            .into_iter()
            .map(|p| {
                score -= rng.random_range(0.01..1.0);
                (p, (score * 1e4_f64).round() / 1e4)
            })
            .collect();
        run.insert(qid.clone(), RankedList::new(qid, ranked).unwrap());
    }
    Inputs {
        corpus,
        queries,
        run,
        qrels: Some(qrels),
    }
}

/// Writes the inputs as files and returns their paths.
pub fn write_inputs(dir: &Path, inputs: &Inputs) -> PathsConfig {
    use std::io::Write;
    let jsonl = |path: &Path, rows: Vec<serde_json::Value>| {
        let mut f = std::fs::File::create(path).unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
    };
    let corpus = dir.join("corpus.jsonl");
    jsonl(
        &corpus,
        inputs
            .corpus
            .values()
            .map(|p| serde_json::json!({"_id": p.id, "text": p.text}))
            .collect(),
    );
    let queries = dir.join("queries.jsonl");
    jsonl(
        &queries,
        inputs
            .queries
            .values()
            .map(|q| serde_json::json!({"_id": q.id, "text": q.text}))
            .collect(),
    );
    let run = dir.join("bm25.run");
    trec_io::write_run(&inputs.run, "bm25", &run).unwrap();
    let qrels = dir.join("qrels.txt");
    trec_io::write_qrels(inputs.qrels.as_ref().unwrap(), &qrels).unwrap();
    PathsConfig {
        corpus,
        queries,
        run,
        qrels: Some(qrels),
        output_dir: dir.join("out"),
    }
}

pub fn graded(rng: &mut ChaCha8Rng, n: usize, max_relevant: usize) -> Vec<u32> {
    let k = rng.random_range(1..=max_relevant);
    let mut levels: Vec<u32> = (0..n)
        .map(|i| if i < k { rng.random_range(1..=3) } else { 0 })
        .collect();
    levels[0] = 3;
    levels.shuffle(rng);
    levels
}
