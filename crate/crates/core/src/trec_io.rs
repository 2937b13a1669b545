//! Readers and writers for TREC runs, qrels, JSONL corpora/queries and
//! score tables.
//!
//! Run lines are `query_id Q0 passage_id rank score tag`; qrels lines are
//! `query_id 0 passage_id level`. Extra trailing columns are ignored.
//! Scores are written with exactly six decimals.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{Judgment, JudgmentSet, Passage, Query, RankedList, RelevanceScore};

/// Runs keyed by query id.
pub type RunMap = BTreeMap<String, RankedList>;

/// Relevance scores keyed by query id, then passage id.
pub type ScoreTable = BTreeMap<String, BTreeMap<String, RelevanceScore>>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Iterates `(1-based line number, line)` skipping blank lines.
fn numbered_lines<'a, R: BufRead + 'a>(
    reader: R,
    path: &'a Path,
) -> impl Iterator<Item = Result<(usize, String)>> + 'a {
    reader
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok((i + 1, l))),
            Err(e) => Some(Err(Error::io(path, e))),
        })
}

pub fn read_run(path: impl AsRef<Path>) -> Result<RunMap> {
    let path = path.as_ref();
    parse_run(open(path)?, path)
}

/// Parses run lines from any reader; `path` is used for error messages.
pub fn parse_run<R: BufRead>(reader: R, path: &Path) -> Result<RunMap> {
    struct Row {
        rank: usize,
        passage_id: String,
        score: f64,
    }
    let mut rows: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut first_line: BTreeMap<String, usize> = BTreeMap::new();

    for item in numbered_lines(reader, path) {
        let (n, line) = item?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 6 {
            return Err(Error::parse(
                path,
                n,
                format!("expected 6 columns, found {}", cols.len()),
            ));
        }
        if cols[1] != "Q0" {
            return Err(Error::parse(
                path,
                n,
                format!("second column must be `Q0`, found `{}`", cols[1]),
            ));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, n, format!("bad rank `{}`", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| Error::parse(path, n, format!("bad score `{}`", cols[4])))?;
        let (qid, pid) = (cols[0].to_string(), cols[2].to_string());
        if !seen.insert((qid.clone(), pid.clone())) {
            return Err(Error::parse(
                path,
                n,
                format!("duplicate entry for query {qid}, passage {pid}"),
            ));
        }
        first_line.entry(qid.clone()).or_insert(n);
        rows.entry(qid).or_default().push(Row {
            rank,
            passage_id: pid,
            score,
        });
    }

    let mut runs = RunMap::new();
    for (qid, mut list) in rows {
        list.sort_by_key(|r| r.rank);
        let ranked = list.into_iter().map(|r| (r.passage_id, r.score)).collect();
        let line = first_line[&qid];
        let list = RankedList::new(qid.clone(), ranked)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        runs.insert(qid, list);
    }
    Ok(runs)
}

/// Writes runs in ascending query id order.
pub fn write_run(runs: &RunMap, tag: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    write_run_to(runs, tag, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_run_to<W: Write>(runs: &RunMap, tag: &str, out: &mut W) -> std::io::Result<()> {
    for (qid, list) in runs {
        for e in list.entries() {
            writeln!(
                out,
                "{qid} Q0 {} {} {:.6} {tag}",
                e.passage_id, e.rank, e.score
            )?;
        }
    }
    Ok(())
}

pub fn read_qrels(path: impl AsRef<Path>) -> Result<JudgmentSet> {
    let path = path.as_ref();
    parse_qrels(open(path)?, path)
}

pub fn parse_qrels<R: BufRead>(reader: R, path: &Path) -> Result<JudgmentSet> {
    let mut set = JudgmentSet::new();
    for item in numbered_lines(reader, path) {
        let (n, line) = item?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 4 {
            return Err(Error::parse(
                path,
                n,
                format!("expected 4 columns, found {}", cols.len()),
            ));
        }
        let level: u32 = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, n, format!("bad relevance level `{}`", cols[3])))?;
        set.insert(Judgment {
            query_id: cols[0].to_string(),
            passage_id: cols[2].to_string(),
            level,
        })
        .map_err(|e| Error::parse(path, n, e.to_string()))?;
    }
    Ok(set)
}

pub fn write_qrels(judgments: &JudgmentSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for (q, p, level) in judgments.iter() {
        writeln!(out, "{q} 0 {p} {level}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(alias = "_id")]
    id: String,
    #[serde(default)]
    title: Option<String>,
    text: String,
}

fn read_jsonl_records(path: &Path) -> Result<Vec<(usize, JsonRecord)>> {
    let mut ids = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            log::warn!("{}:{n}: skipping blank line", path.display());
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, n, e.to_string()))?;
        if rec.id.is_empty() {
            return Err(Error::parse(path, n, "empty id"));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(Error::parse(path, n, format!("duplicate id `{}`", rec.id)));
        }
        records.push((n, rec));
    }
    Ok(records)
}

/// Reads a JSONL corpus. A non-empty `title` is joined before `text` with
/// one space.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<BTreeMap<String, Passage>> {
    let path = path.as_ref();
    read_jsonl_records(path)?
        .into_iter()
        .map(|(n, rec)| {
            let text = match rec.title.as_deref() {
                Some(t) if !t.is_empty() => format!("{t} {}", rec.text),
                _ => rec.text,
            };
            let passage =
                Passage::new(rec.id, text).map_err(|e| Error::parse(path, n, e.to_string()))?;
            Ok((passage.id.clone(), passage))
        })
        .collect()
}

pub fn read_queries(path: impl AsRef<Path>) -> Result<BTreeMap<String, Query>> {
    let path = path.as_ref();
    read_jsonl_records(path)?
        .into_iter()
        .map(|(n, rec)| {
            let query =
                Query::new(rec.id, rec.text).map_err(|e| Error::parse(path, n, e.to_string()))?;
            Ok((query.id.clone(), query))
        })
        .collect()
}

/// Writes one JSON object per score, ordered by query then passage id.
pub fn write_scores(scores: &ScoreTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for s in scores.values().flat_map(|m| m.values()) {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreTable> {
    let path = path.as_ref();
    let mut table = ScoreTable::new();
    for item in numbered_lines(open(path)?, path) {
        let (n, line) = item?;
        let s: RelevanceScore =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, n, e.to_string()))?;
        if !(0.0..=1.0).contains(&s.value) {
            return Err(Error::parse(
                path,
                n,
                format!("score {} outside [0, 1]", s.value),
            ));
        }
        let per_query = table.entry(s.query_id.clone()).or_default();
        if per_query.contains_key(&s.passage_id) {
            return Err(Error::parse(
                path,
                n,
                format!("duplicate score for {}/{}", s.query_id, s.passage_id),
            ));
        }
        per_query.insert(s.passage_id.clone(), s);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn run_from(text: &str) -> Result<RunMap> {
        parse_run(Cursor::new(text), Path::new("test.run"))
    }

    fn qrels_from(text: &str) -> Result<JudgmentSet> {
        parse_qrels(Cursor::new(text), Path::new("test.qrels"))
    }

    #[test]
    fn single_run_line() {
        let runs = run_from("264014 Q0 8012101 1 13.34 bm25\n").unwrap();
        let list = &runs["264014"];
        assert_eq!(list.len(), 1);
        assert_eq!(list.entries()[0].passage_id, "8012101");
        assert_eq!(list.entries()[0].rank, 1);
        assert_eq!(list.entries()[0].score, 13.34);
    }

    #[test]
    fn empty_run_is_empty_map() {
        assert!(run_from("").unwrap().is_empty());
    }

    #[test]
    fn short_line_reports_line_number() {
        let err = run_from("q Q0 a 1 2.0 t\nq Q0 b 2 1.0\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
    }

    #[test]
    fn ranks_are_trusted_then_renumbered() {
        let runs = run_from("q Q0 b 7 1.0 t\nq Q0 a 3 2.0 t\n").unwrap();
        let got: Vec<(&str, usize)> = runs["q"]
            .entries()
            .iter()
            .map(|e| (e.passage_id.as_str(), e.rank))
            .collect();
        assert_eq!(got, vec![("a", 1), ("b", 2)]);
    }

    #[test]
    fn duplicate_run_pair_is_error() {
        let err = run_from("q Q0 a 1 2.0 t\nq Q0 a 2 1.0 t\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
    }

    #[test]
    fn extra_columns_tolerated() {
        let runs = run_from("q Q0 a 1 2.0 t # comment here\n").unwrap();
        assert_eq!(runs["q"].len(), 1);
        let qrels = qrels_from("q 0 a 2 extra\n").unwrap();
        assert_eq!(qrels.level("q", "a"), Some(2));
    }

    #[test]
    fn locale_style_numbers_rejected() {
        assert!(run_from("q Q0 a 1 1,5 t\n").is_err());
        assert!(run_from("q Q0 a 1 1.000,5 t\n").is_err());
    }

    #[test]
    fn six_decimal_formatting() {
        let mut runs = RunMap::new();
        runs.insert(
            "q".into(),
            RankedList::new("q", vec![("d".into(), 13.340000004)]).unwrap(),
        );
        let mut buf = Vec::new();
        write_run_to(&runs, "tag", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "q Q0 d 1 13.340000 tag\n");
    }

    #[test]
    fn empty_run_map_writes_empty_file() {
        let mut buf = Vec::new();
        write_run_to(&RunMap::new(), "t", &mut buf).unwrap();
        assert!(buf.is_empty());
    }

    #[test]
    fn qrels_line_and_conflict() {
        let set = qrels_from("19335 0 1017759 0\n").unwrap();
        assert_eq!(set.level("19335", "1017759"), Some(0));

        let err = qrels_from("q 0 d 1\nq 0 d 2\n").unwrap_err();
        assert_eq!(err.line(), Some(2));

        let set = qrels_from("q 0 a 1\nq 0 b 0\nr 0 a 3\nr 0 c 2\n").unwrap();
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn qrels_negative_level_rejected() {
        assert!(qrels_from("q 0 d -1\n").is_err());
    }

    #[test]
    fn corpus_title_and_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"d1\",\"text\":\"hello\"}\n\n{\"_id\":\"d2\",\"title\":\"A\",\"text\":\"B\"}\n{\"id\":\"d3\",\"title\":\"\",\"text\":\"C\"}\n",
        )
        .unwrap();
        let corpus = read_corpus(&path).unwrap();
        assert_eq!(corpus["d1"].text, "hello");
        assert_eq!(corpus["d2"].text, "A B");
        assert_eq!(corpus["d3"].text, "C");
    }

    #[test]
    fn corpus_duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"d\",\"text\":\"x\"}\n{\"id\":\"d\",\"text\":\"y\"}\n",
        )
        .unwrap();
        assert_eq!(read_corpus(&path).unwrap_err().line(), Some(2));
    }

    #[test]
    fn scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        let mut table = ScoreTable::new();
        let mut s = RelevanceScore::new("q", "d1", 0.25);
        s.raw_response = Some("Passage [1]: 0.25".into());
        table.entry("q".into()).or_default().insert("d1".into(), s);
        let mut f = RelevanceScore::new("q", "d2", 0.0);
        f.fallback = true;
        table.entry("q".into()).or_default().insert("d2".into(), f);
        write_scores(&table, &path).unwrap();
        assert_eq!(read_scores(&path).unwrap(), table);
    }
}
